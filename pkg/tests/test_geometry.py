import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from vlocnet import geometry as G
from vlocnet.geometry import Pose, RelativeMotion

from conftest import unit_quats

S = np.sqrt(2) / 2


def to_scipy(q):
    q = np.asarray(q)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def random_pose(rng):
    return Pose(rng.uniform(-5, 5, 3), G.random_quat(rng))


# ---------------------------------------------------------------- examples


def test_normalize_examples():
    np.testing.assert_array_equal(G.quat_normalize([2, 0, 0, 0]), [1, 0, 0, 0])
    np.testing.assert_array_equal(G.quat_normalize([1, 1, 1, 1]), [0.5, 0.5, 0.5, 0.5])
    with pytest.raises(G.DegenerateQuaternionError):
        G.quat_normalize([0, 0, 0, 0])


def test_mul_examples(rng):
    q = G.random_quat(rng)
    np.testing.assert_allclose(G.quat_mul(G.IDENTITY, q), q, atol=1e-15)
    np.testing.assert_allclose(G.quat_mul(q, G.quat_conjugate(q)), G.IDENTITY, atol=1e-15)
    z90 = np.array([S, 0, 0, S])
    np.testing.assert_allclose(G.quat_mul(z90, z90), [0, 0, 0, 1], atol=1e-15)
    # oracle: the matrix product of the two rotations
    np.testing.assert_allclose(G.quat_to_matrix(G.quat_mul(z90, z90)), G.quat_to_matrix(z90) @ G.quat_to_matrix(z90), atol=1e-15)


def test_mul_rejects_non_unit():
    with pytest.raises(G.NonUnitQuaternionError):
        G.quat_mul([2, 0, 0, 0], G.IDENTITY)


def test_inverse_examples(rng):
    np.testing.assert_array_equal(G.quat_inverse([1, 0, 0, 0]), [1, 0, 0, 0])
    np.testing.assert_allclose(G.quat_inverse([S, S, 0, 0]), [S, -S, 0, 0], atol=1e-16)
    q = G.random_quat(rng)
    np.testing.assert_allclose(G.quat_mul(q, G.quat_inverse(q)), G.IDENTITY, atol=1e-12)


def test_relative_motion_examples(rng):
    a = Pose([1, 2, 3], G.IDENTITY)
    b = Pose([0.5, 1, 1], G.IDENTITY)
    np.testing.assert_allclose(G.relative_motion(a, b).x_rel, [0.5, 1, 2], atol=0)
    p = random_pose(rng)
    rel = G.relative_motion(p, p)
    np.testing.assert_array_equal(rel.x_rel, 0)
    assert G.angular_distance(rel.q_rel, G.IDENTITY) < 1e-6
    np.testing.assert_allclose(np.abs(rel.q_rel), G.IDENTITY, atol=1e-15)


def test_compose_with_zero_motion(rng):
    p = random_pose(rng)
    c = G.compose(p, RelativeMotion(np.zeros(3)))
    np.testing.assert_allclose(c.x, p.x, atol=0)
    np.testing.assert_allclose(c.q, p.q, atol=1e-15)


def test_chain_of_motions_matches_single_composed_motion(rng):
    start = random_pose(rng)
    rels = [RelativeMotion(rng.standard_normal(3), G.random_quat(rng)) for _ in range(10)]
    p = start
    for r in rels:
        p = G.compose(p, r)
    # oracle: the translations add up and the rotations multiply as matrices
    r_total = np.eye(3)
    for r in rels:
        r_total = r_total @ G.quat_to_matrix(r.q_rel)
    np.testing.assert_allclose(p.x, start.x + sum(r.x_rel for r in rels), atol=1e-10)
    np.testing.assert_allclose(G.quat_to_matrix(p.q), G.quat_to_matrix(start.q) @ r_total, atol=1e-10)


def test_angular_distance_examples(rng):
    q = G.random_quat(rng)
    assert G.angular_distance(q, q) == pytest.approx(0, abs=1e-6)
    assert G.angular_distance(q, -q) == pytest.approx(0, abs=1e-6)
    assert G.angular_distance(G.IDENTITY, [S, 0, 0, S]) == pytest.approx(90.0, abs=1e-12)


def test_angular_distance_matches_scipy(rng):
    a, b = unit_quats(rng, 200), unit_quats(rng, 200)
    ref = np.degrees((to_scipy(a).inv() * to_scipy(b)).magnitude())
    np.testing.assert_allclose(G.angular_distance(a, b), ref, atol=1e-6)


def test_matrix_pose_examples():
    p = G.matrix_to_pose(np.eye(4))
    np.testing.assert_array_equal(p.x, 0)
    np.testing.assert_array_equal(p.q, G.IDENTITY)
    m = np.eye(4)
    m[:3, 3] = [1, 2, 3]
    p = G.matrix_to_pose(m)
    np.testing.assert_array_equal(p.x, [1, 2, 3])
    np.testing.assert_array_equal(p.q, G.IDENTITY)


def test_matrix_round_trip_100_rotations(rng):
    worst = 0.0
    for _ in range(100):
        m = np.eye(4)
        m[:3, :3] = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        m[:3, 3] = rng.uniform(-10, 10, 3)
        worst = max(worst, np.max(np.abs(G.pose_to_matrix(G.matrix_to_pose(m)) - m)))
    assert worst < 1e-9


def test_quat_to_matrix_matches_scipy(rng):
    for q in unit_quats(rng, 50):
        np.testing.assert_allclose(G.quat_to_matrix(q), to_scipy(q).as_matrix(), atol=1e-14)


def test_matrix_to_pose_rejects_bad_matrices():
    m = np.eye(4)
    m[0, 0] = 2
    with pytest.raises(G.NonOrthonormalRotationError):
        G.matrix_to_pose(m)
    m = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(G.NonOrthonormalRotationError):
        G.matrix_to_pose(m)
    m = np.eye(4)
    m[3, 0] = 1
    with pytest.raises(G.NonOrthonormalRotationError):
        G.matrix_to_pose(m)


def test_pose_is_normalized_and_canonical_has_nonnegative_w():
    p = Pose([0, 0, 0], [-2, 0, 0, 0])
    assert np.linalg.norm(p.q) == pytest.approx(1, abs=1e-9)
    assert p.canonical().q[0] >= 0


# ---------------------------------------------------------------- 1000-sample properties


def test_group_properties_on_1000_poses(rng):
    for _ in range(1000):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        r1, r2 = G.relative_motion(b, a), G.relative_motion(c, b)
        # associativity of composition
        left = G.compose(G.compose(a, r1), r2)
        r12 = RelativeMotion(r1.x_rel + r2.x_rel, G.quat_mul(r1.q_rel, r2.q_rel))
        right = G.compose(a, r12)
        assert np.max(np.abs(left.x - right.x)) < 1e-10
        assert G.angular_distance(left.q, right.q) < 1e-5
        assert np.max(np.abs(G.quat_to_matrix(left.q) - G.quat_to_matrix(right.q))) < 1e-10
        # mutual inverses
        back = G.compose(a, G.relative_motion(b, a))
        assert np.max(np.abs(back.x - b.x)) < 1e-10
        assert min(np.max(np.abs(back.q - b.q)), np.max(np.abs(back.q + b.q))) < 1e-10
        again = G.relative_motion(G.compose(a, r1), a)
        assert np.max(np.abs(again.x_rel - r1.x_rel)) < 1e-10
        assert min(np.max(np.abs(again.q_rel - r1.q_rel)), np.max(np.abs(again.q_rel + r1.q_rel))) < 1e-10


def test_sign_invariance_and_inverse_on_1000_quaternions(rng):
    q = unit_quats(rng, 1000)
    p = unit_quats(rng, 1000)
    np.testing.assert_array_equal(G.angular_distance(q, p), G.angular_distance(-q, p))
    np.testing.assert_array_equal(G.angular_distance(q, p), G.angular_distance(q, -p))
    for a in q:
        np.testing.assert_allclose(G.quat_mul(a, G.quat_inverse(a)), G.IDENTITY, atol=1e-12)
        np.testing.assert_allclose(G.quat_to_matrix(-a), G.quat_to_matrix(a), atol=0)


def test_pseudometric_on_sampled_triples(rng):
    a, b, c = unit_quats(rng, 1000), unit_quats(rng, 1000), unit_quats(rng, 1000)
    dab, dba = G.angular_distance(a, b), G.angular_distance(b, a)
    np.testing.assert_array_equal(dab, dba)
    assert np.all(G.angular_distance(a, b) <= G.angular_distance(a, c) + G.angular_distance(c, b) + 1e-9)


@settings(max_examples=200)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_matrix_to_quat_round_trip_property(v):
    q = G.canonicalize(np.array(v))
    back = G.matrix_to_quat(G.quat_to_matrix(q))
    assert back[0] >= 0
    assert G.angular_distance(q, back) < 1e-5
    np.testing.assert_allclose(G.quat_to_matrix(back), G.quat_to_matrix(q), atol=1e-12)


@given(st.floats(-np.pi, np.pi), st.integers(0, 2))
def test_axis_angle(angle, axis_index):
    axis = np.eye(3)[axis_index]
    q = G.axis_angle_to_quat(axis, angle)
    ref = Rotation.from_rotvec(axis * angle).as_matrix()
    np.testing.assert_allclose(G.quat_to_matrix(q), ref, atol=1e-12)
