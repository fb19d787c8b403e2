"""Pose and quaternion algebra on plain numpy arrays.

Quaternions are (w, x, y, z), Hamilton convention. A pose maps camera
coordinates into the world frame: translation ``x`` and rotation ``q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12
UNIT_TOL = 1e-6
ORTHO_TOL = 1e-4


class DegenerateQuaternionError(ValueError):
    pass


class NonUnitQuaternionError(ValueError):
    pass


class NonOrthonormalRotationError(ValueError):
    pass


IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _check_unit(q: np.ndarray, tol: float = UNIT_TOL) -> None:
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise NonUnitQuaternionError(f"quaternion norm {np.max(np.abs(n - 1.0)) + 1.0:.3g} is not unit")


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= EPS):
        raise DegenerateQuaternionError("cannot normalize a (near-)zero quaternion")
    return q / n


def canonicalize(q) -> np.ndarray:
    """Normalize and pick the representative with w >= 0."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_unit(a)
    _check_unit(b)
    return quat_normalize(_hamilton(a, b))


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    _check_unit(q)
    return quat_conjugate(q)


def quat_left_matrix(q) -> np.ndarray:
    """4x4 matrix L with L @ b == q * b (Hamilton)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r) -> np.ndarray:
    """Rotation matrix to unit quaternion, branching on the largest diagonal term."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > max(r[0, 0], r[1, 1], r[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return canonicalize(np.array(q))


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def random_quat(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniformly distributed unit quaternions."""
    shape = (4,) if size is None else (size, 4)
    return quat_normalize(rng.standard_normal(shape))


@dataclass(frozen=True)
class Pose:
    x: np.ndarray
    q: np.ndarray = field(default_factory=lambda: IDENTITY.copy())

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).reshape(3))
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.q])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:7])

    def canonical(self) -> "Pose":
        return Pose(self.x, canonicalize(self.q))


@dataclass(frozen=True)
class RelativeMotion:
    x_rel: np.ndarray
    q_rel: np.ndarray = field(default_factory=lambda: IDENTITY.copy())

    def __post_init__(self):
        object.__setattr__(self, "x_rel", np.asarray(self.x_rel, dtype=np.float64).reshape(3))
        object.__setattr__(self, "q_rel", quat_normalize(np.asarray(self.q_rel, dtype=np.float64).reshape(4)))


def relative_motion(p_t: Pose, p_prev: Pose) -> RelativeMotion:
    """Translation difference and q_prev^-1 * q_t."""
    return RelativeMotion(p_t.x - p_prev.x, quat_mul(quat_inverse(p_prev.q), p_t.q))


def compose(p_prev: Pose, rel: RelativeMotion) -> Pose:
    return Pose(p_prev.x + rel.x_rel, quat_mul(p_prev.q, rel.q_rel))


def angular_distance(q1, q2) -> np.ndarray | float:
    """Geodesic angle in degrees between the rotations, invariant to quaternion sign."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    _check_unit(q1)
    _check_unit(q2)
    dot = np.abs(np.sum(q1 * q2, axis=-1))
    ang = np.degrees(2.0 * np.arccos(np.minimum(1.0, dot)))
    return float(ang) if np.ndim(ang) == 0 else ang


def translation_distance(x1, x2) -> np.ndarray | float:
    d = np.linalg.norm(np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def pose_to_matrix(p: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(p.q)
    m[:3, 3] = p.x
    return m


def matrix_to_pose(m) -> Pose:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 transform, got shape {m.shape}")
    if np.max(np.abs(m[3] - [0, 0, 0, 1])) > ORTHO_TOL:
        raise NonOrthonormalRotationError(f"bottom row {m[3].tolist()} is not (0, 0, 0, 1)")
    r = m[:3, :3]
    dev = float(np.max(np.abs(r.T @ r - np.eye(3))))
    if dev > ORTHO_TOL:
        raise NonOrthonormalRotationError(f"rotation block deviates from orthonormal by {dev:.3g}")
    det = float(np.linalg.det(r))
    if det <= 0:
        raise NonOrthonormalRotationError(f"rotation block has determinant {det:.3g}")
    return Pose(m[:3, 3], matrix_to_quat(r))
