"""Finite-difference verification of every primitive and every loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .losses import PoseT, ScaleParams

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class Check:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]


def _projected(op: Callable, shape_out_seed: int = 0):
    """Wrap a tensor-valued op into a scalar by a fixed random projection."""

    def f(*args):
        out = op(*args)
        w = np.random.default_rng(shape_out_seed).standard_normal(out.shape)
        return T.sum_(T.mul(out, w))

    return f


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, shape)


def _unit(rng, n=None):
    shape = (4,) if n is None else (n, 4)
    q = rng.standard_normal(shape)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _primitive_checks() -> list[Check]:
    c = []
    c.append(Check("add", lambda r: (_projected(T.add), [r.standard_normal((3, 4)), r.standard_normal((4,))])))
    c.append(Check("sub", lambda r: (_projected(T.sub), [r.standard_normal((3, 4)), r.standard_normal((3, 1))])))
    c.append(Check("mul", lambda r: (_projected(T.mul), [r.standard_normal((3, 4)), r.standard_normal((3, 4))])))
    c.append(Check("div", lambda r: (_projected(T.div), [r.standard_normal((3, 4)), _away_from_zero(r, (3, 4), 0.5)])))
    c.append(Check("scale", lambda r: (_projected(lambda a: T.scale(a, -1.7)), [r.standard_normal((5,))])))
    c.append(Check("matmul", lambda r: (_projected(T.matmul), [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))])))
    for stride, pad, k in ((1, "same", 3), (2, "same", 3), (1, "valid", 3), (2, "same", 1)):
        c.append(
            Check(
                f"conv2d[k{k},s{stride},{pad}]",
                lambda r, s=stride, p=pad, k=k: (
                    _projected(lambda x, w: T.conv2d(x, w, s, p)),
                    [r.standard_normal((2, 5, 5, 2)), r.standard_normal((k, k, 2, 3))],
                ),
            )
        )
    c.append(Check("elu", lambda r: (_projected(T.elu), [_away_from_zero(r, (4, 3), 0.01)])))
    c.append(Check("relu", lambda r: (_projected(T.relu), [_away_from_zero(r, (4, 3))])))
    c.append(
        Check(
            "affine",
            lambda r: (_projected(T.affine), [r.standard_normal((2, 3, 3, 4)), r.standard_normal(4), r.standard_normal(4)]),
        )
    )
    c.append(Check("global_avg_pool", lambda r: (_projected(T.global_avg_pool), [r.standard_normal((2, 3, 4, 5))])))
    c.append(
        Check(
            "concat",
            lambda r: (_projected(lambda a, b: T.concat([a, b], axis=-1)), [r.standard_normal((2, 3, 2)), r.standard_normal((2, 3, 4))]),
        )
    )
    c.append(Check("reshape", lambda r: (_projected(lambda a: T.reshape(a, (6, 2))), [r.standard_normal((3, 4))])))
    c.append(Check("exp", lambda r: (_projected(T.exp), [r.standard_normal((4,))])))
    c.append(Check("square", lambda r: (_projected(T.square), [r.standard_normal((4,))])))
    c.append(Check("sum", lambda r: (_projected(lambda a: T.sum_(a, axis=0)), [r.standard_normal((3, 4))])))
    c.append(Check("sqrt", lambda r: (_projected(T.sqrt), [r.uniform(0.2, 2.0, (4,))])))
    c.append(Check("l2_norm", lambda r: (_projected(lambda a: T.l2_norm(a, axis=-1)), [r.standard_normal((3, 4))])))
    c.append(
        Check(
            "dropout",
            lambda r: (_projected(lambda a: T.dropout(a, 0.8, np.random.default_rng(1), True)), [r.standard_normal((4, 5))]),
        )
    )
    c.append(Check("getitem", lambda r: (_projected(lambda a: a[:, 1:3]), [r.standard_normal((3, 4))])))
    c.append(Check("stack", lambda r: (_projected(lambda a, b: T.stack([a, b], axis=-1)), [r.standard_normal(3), r.standard_normal(3)])))
    return c


def _loss_checks() -> list[Check]:
    def pose_pt(r, n=3):
        return [r.standard_normal((n, 3)), _unit(r, n)]

    c = []
    def trans(r):
        gt = r.standard_normal((3, 3))
        return (lambda x: L.trans_loss(x, gt)), [r.standard_normal((3, 3))]

    def rot(r):
        gt = _unit(r, 3)
        return (lambda q: L.rot_loss(q, gt)), [_unit(r, 3)]

    c.append(Check("translation_loss", trans))
    c.append(Check("rotation_loss", rot))

    def beta(r):
        gt = PoseT(*pose_pt(r))
        b = float(r.uniform(0.5, 500))
        return (lambda x, q: L.beta_loss(PoseT(x, q), gt, b)), pose_pt(r)

    c.append(Check("beta_weighted_loss", beta))

    def sigma(r):
        gt = PoseT(*pose_pt(r))
        return (lambda x, q, sx, sq: L.sigma_loss(PoseT(x, q), gt, ScaleParams(sx, sq))), pose_pt(r) + [
            r.uniform(-3, 0, ()),
            r.uniform(-4.8, -3, ()),
        ]

    c.append(Check("scale_weighted_loss", sigma))

    def residuals(r):
        prev = PoseT(*pose_pt(r))
        return _projected(lambda x, q: T.concat(list(L.odom_residuals(PoseT(x, q), prev)), axis=-1)), pose_pt(r)

    c.append(Check("relative_residuals", residuals))

    def quat_ops(r):
        return _projected(lambda a, b: L.quat_mul_t(L.quat_conjugate_t(a), b)), [_unit(r, 3), _unit(r, 3)]

    c.append(Check("quat_inverse*quat_mul", quat_ops))

    def odom_x(r):
        prev, rel = PoseT(*pose_pt(r)), PoseT(*pose_pt(r))
        return (lambda x, q: L.odom_loss_terms(L.odom_residuals(PoseT(x, q), prev), rel)[0]), pose_pt(r)

    def odom_q(r):
        prev, rel = PoseT(*pose_pt(r)), PoseT(*pose_pt(r))
        return (lambda x, q: L.odom_loss_terms(L.odom_residuals(PoseT(x, q), prev), rel)[1]), pose_pt(r)

    c.append(Check("relative_translation_loss", odom_x))
    c.append(Check("relative_rotation_loss", odom_q))

    def geo(r):
        gt, prev, rel = PoseT(*pose_pt(r)), PoseT(*pose_pt(r)), PoseT(*pose_pt(r))
        return (
            lambda x, q, sx, sq: L.geometric_consistency_loss(PoseT(x, q), gt, prev, rel, ScaleParams(sx, sq))
        ), pose_pt(r) + [r.uniform(-3, 0, ()), r.uniform(-4.8, -3, ())]

    c.append(Check("geometric_consistency_loss", geo))

    def vo(r):
        gt = PoseT(*pose_pt(r))
        return (lambda x, q, sx, sq: L.vo_loss(PoseT(x, q), gt, ScaleParams(sx, sq))), pose_pt(r) + [
            r.uniform(-3, 0, ()),
            r.uniform(-4.8, -3, ()),
        ]

    c.append(Check("odometry_loss", vo))
    return c


def registry() -> list[Check]:
    return _primitive_checks() + _loss_checks()


@dataclass
class Row:
    name: str
    max_rel_error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run(points: int = 20, seed: int = 0, checks: list[Check] | None = None, step: float = STEP) -> list[Row]:
    rows = []
    for i, check in enumerate(checks if checks is not None else registry()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(points):
            f, point = check.make(rng)
            worst = max(worst, T.grad_check(f, point, step))
        rows.append(Row(check.name, worst, points))
    return rows


def format_table(rows: list[Row], elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"{len(rows)} checks, {sum(r.passed for r in rows)} passed, {elapsed:.1f}s")
    return "\n".join(lines)


def main_table(points: int = 20, seed: int = 0, checks=None) -> tuple[str, bool]:
    t0 = time.perf_counter()
    rows = run(points, seed, checks)
    return format_table(rows, time.perf_counter() - t0), all(r.passed for r in rows)
