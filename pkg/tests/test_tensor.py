import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vlocnet import tensor as T
from vlocnet.tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_elu_fixed_point_and_negative_branch():
    assert T.elu(Tensor(0.0)).data == 0.0
    assert T.elu(Tensor(-1.0)).data == pytest.approx(np.exp(-1) - 1, abs=1e-15)
    assert T.elu(Tensor(-1.0)).data == pytest.approx(-0.6321205588285577, abs=1e-15)


def test_constant_field_convolution():
    out = T.conv2d(Tensor(np.ones((1, 5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))), 1, "valid")
    assert out.shape == (1, 3, 3, 1)
    assert np.all(out.data == 9.0)


def _same_pad(size, k, stride):
    # "same" output is ceil(size / stride); any odd leftover padding goes after
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 6, 7, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    for stride in (1, 2):
        out = T.conv2d(Tensor(x), Tensor(w), stride, "same").data
        assert out.shape[1:3] == (-(-6 // stride), -(-7 // stride))
        xp = np.pad(x, ((0, 0), _same_pad(6, 3, stride), _same_pad(7, 3, stride), (0, 0)))
        ref = np.zeros_like(out)
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[:, i * stride : i * stride + 3, j * stride : j * stride + 3, :]
                ref[:, i, j, :] = np.einsum("nhwc,hwcd->nd", patch, w)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


def test_backward_square_sum():
    x = leaf([1.0, 2.0, 3.0])
    with Tape():
        grads = T.backward(T.sum_(T.square(x)))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])


def test_backward_of_constant_is_empty():
    assert T.backward(Tensor(3.0)) == {}


def test_backward_l2_norm_is_unit_vector():
    x = leaf([3.0, 4.0])
    with Tape():
        grads = T.backward(T.l2_norm(x))
    np.testing.assert_allclose(grads[x], [0.6, 0.8], atol=1e-15)


def test_l2_norm_subgradient_at_zero():
    x = leaf([0.0, 0.0, 0.0])
    with Tape():
        grads = T.backward(T.l2_norm(x))
    np.testing.assert_array_equal(grads[x], np.zeros(3))


def test_gradients_accumulate_into_leaves():
    x = leaf([1.0, -2.0])
    for _ in range(2):
        with Tape():
            T.backward(T.sum_(T.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_tape_is_single_use():
    x = leaf([1.0])
    with Tape():
        y = T.sum_(T.square(x))
        T.backward(y)
        with pytest.raises(TapeError):
            T.backward(y)


def test_tape_records_in_topological_order():
    x = leaf(np.ones(3))
    with Tape() as tape:
        a = T.exp(x)
        b = T.mul(a, x)
        c = T.sum_(b)
        nodes = list(tape.nodes)
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    assert nodes[-1] is c


def test_backward_requires_scalar_root():
    with Tape():
        with pytest.raises(ShapeError):
            T.backward(T.square(leaf([1.0, 2.0])))


def test_nonfinite_output_is_reported_at_the_op():
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_gradient_linearity(rng):
    a0, b0 = rng.standard_normal(5), rng.standard_normal(5)

    def f(a, b):
        return T.sum_(T.mul(T.elu(a), b))

    def g(a, b):
        return T.sum_(T.exp(T.scale(a, 0.3)))

    def grads(fn):
        a, b = leaf(a0), leaf(b0)
        with Tape():
            out = T.backward(fn(a, b))
        return out.get(a, 0), out.get(b, 0)

    a, b = leaf(a0), leaf(b0)
    with Tape():
        both = T.backward(T.add(f(a, b), g(a, b)))
    fa, fb = grads(f)
    ga, gb = grads(g)
    np.testing.assert_allclose(both[a], fa + ga, rtol=0, atol=1e-15)
    np.testing.assert_allclose(both[b], fb + gb, rtol=0, atol=1e-15)


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    assert T.dropout(x, 0.8, rng, train=False) is x


def test_dropout_train_expectation(rng):
    # Inverted dropout keeps the input in expectation: E[out] = x.
    x = np.array([1.0, -2.0, 0.5])
    keep = 0.8
    n = 20000
    outs = np.stack([T.dropout(Tensor(x), keep, rng, True).data for _ in range(n)])
    mean, se = outs.mean(0), outs.std(0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - x) < 3 * se + 1e-12)


def test_grad_check_examples():
    assert T.grad_check(lambda x: T.sum_(T.square(x)), np.array([1.0, 2.0, 3.0])) < 1e-8
    assert T.grad_check(lambda x: T.sum_(T.scale(x, 0.0)), np.array([1.0, 2.0])) == 0.0


def test_grad_check_catches_wrong_gradient(monkeypatch):
    def bad_exp(a):
        a = T.as_tensor(a)
        out = np.exp(a.data)
        return T._make(out, (a,), lambda g: (2.0 * g * out,), "exp")

    assert T.grad_check(lambda x: T.sum_(bad_exp(x)), np.array([0.1, 0.2])) > 1e-2


def test_grad_check_geometric_consistency_loss(rng):
    from vlocnet import losses as L

    def q(n):
        v = rng.standard_normal((n, 4))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    gt = L.PoseT(rng.standard_normal((2, 3)), q(2))
    prev = L.PoseT(rng.standard_normal((2, 3)), q(2))
    rel = L.PoseT(rng.standard_normal((2, 3)), q(2))

    def f(x, qq, sx, sq):
        return L.geometric_consistency_loss(L.PoseT(x, qq), gt, prev, rel, L.ScaleParams(sx, sq))

    err = T.grad_check(f, [rng.standard_normal((2, 3)), q(2), np.array(-1.0), np.array(-3.5)])
    assert err < 1e-4


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
def test_elu_gradient_property(x):
    x = x + np.where(np.abs(x) < 1e-3, 0.01, 0.0)
    assert T.grad_check(lambda a: T.sum_(T.elu(a)), x) < 1e-4


@given(
    st.integers(1, 3),
    st.integers(3, 6),
    st.integers(1, 3),
    st.integers(1, 3),
    st.sampled_from([1, 2]),
    st.sampled_from(["same", "valid"]),
    st.integers(0, 2**32 - 1),
)
def test_conv2d_gradient_property(n, size, cin, cout, stride, padding, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, size, size, cin))
    w = r.standard_normal((3, 3, cin, cout))
    proj = None

    def f(a, b):
        nonlocal proj
        out = T.conv2d(a, b, stride, padding)
        if proj is None:
            proj = r.standard_normal(out.shape)
        return T.sum_(T.mul(out, proj))

    assert T.grad_check(f, [x, w]) < 1e-4


@given(st.integers(0, 2**32 - 1))
def test_matmul_and_affine_gradients(seed):
    r = np.random.default_rng(seed)
    proj = r.standard_normal((2, 3, 5))
    assert T.grad_check(lambda a, b: T.sum_(T.mul(T.matmul(a, b), proj)), [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]) < 1e-4
    proj2 = r.standard_normal((2, 2, 2, 3))
    pts = [r.standard_normal((2, 2, 2, 3)), r.standard_normal(3), r.standard_normal(3)]
    assert T.grad_check(lambda a, w, b: T.sum_(T.mul(T.affine(a, w, b), proj2)), pts) < 1e-4


def test_global_avg_pool_value(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(T.global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)), atol=1e-15)


def test_reshape_mismatch():
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_no_grad_records_nothing_and_nests():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        with T.no_grad():
            y = T.mul(x, x)
        z = T.add(x, x)
        assert not T.grad_enabled()
    assert T.grad_enabled()
    assert not y.requires_grad and not z.requires_grad
    assert y._tape is None and y._parents == ()
    with Tape() as tape:
        w = T.mul(x, x)
    assert w.requires_grad and len(tape) == 1


def test_inference_leaves_default_tape_empty(tiny_config):
    from vlocnet.data import FrameRecord, PreprocessConfig
    from vlocnet.evaluation import predict_odometry, predict_sequence
    from vlocnet.geometry import Pose
    from vlocnet.model import build

    rng = np.random.default_rng(0)
    params = build(tiny_config, seed=0)
    seq = [FrameRecord("s", i, Pose(np.zeros(3), np.array([1.0, 0, 0, 0])), image=rng.integers(0, 255, (16, 16, 3), dtype=np.uint8)) for i in range(3)]
    pre, mean = PreprocessConfig(16, 16), np.zeros((16, 16, 3))
    before = len(T.active_tape())
    predict_sequence(params, seq, pre, mean)
    predict_odometry(params, seq, pre, mean)
    # a leaked graph here would keep every activation alive until the next backward
    assert len(T.active_tape()) == before
