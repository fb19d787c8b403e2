"""Differentiable pose losses: Euclidean terms, beta weighting, learnable
log-scale weighting, relative-motion consistency terms and the odometry loss.

Predictions are ``(x, q)`` pairs of Tensors with an optional leading batch
axis; groundtruth is plain arrays of matching shape. Every loss returns the
batch mean as a scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("beta", "sigma", "geo")


class PoseT(NamedTuple):
    """Translation and (normalized) quaternion, as Tensors or arrays."""

    x: Tensor
    q: Tensor


@dataclass
class ScaleParams:
    s_x: Tensor
    s_q: Tensor

    @classmethod
    def create(cls, s_x: float, s_q: float, learnable: bool = True, prefix: str = "scale") -> "ScaleParams":
        return cls(
            Tensor(float(s_x), requires_grad=learnable, name=f"{prefix}.s_x"),
            Tensor(float(s_q), requires_grad=learnable, name=f"{prefix}.s_q"),
        )

    def values(self) -> tuple[float, float]:
        return float(self.s_x.data), float(self.s_q.data)


@dataclass(frozen=True)
class LossConfig:
    mode: str = "geo"
    beta: float = 1.0
    gamma: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.gamma != 2:
            raise ValueError("only the L2 norm (gamma=2) is supported")


def _norm_loss(pred, gt) -> Tensor:
    diff = T.sub(pred, gt)
    return T.mean(T.l2_norm(diff, axis=-1))


def trans_loss(x_pred, x_gt) -> Tensor:
    return _norm_loss(x_pred, x_gt)


def rot_loss(q_pred, q_gt) -> Tensor:
    return _norm_loss(q_pred, q_gt)


def weighted(l_x: Tensor, l_q: Tensor, s: ScaleParams) -> Tensor:
    """l_x exp(-s_x) + s_x + l_q exp(-s_q) + s_q."""
    tx = T.add(T.mul(l_x, T.exp(T.scale(s.s_x, -1.0))), s.s_x)
    tq = T.add(T.mul(l_q, T.exp(T.scale(s.s_q, -1.0))), s.s_q)
    return T.add(tx, tq)


def beta_loss(pred: PoseT, gt: PoseT, beta: float) -> Tensor:
    if not beta > 0:
        raise ValueError("beta must be positive")
    return T.add(trans_loss(pred.x, gt.x), T.scale(rot_loss(pred.q, gt.q), beta))


def sigma_loss(pred: PoseT, gt: PoseT, s: ScaleParams) -> Tensor:
    return weighted(trans_loss(pred.x, gt.x), rot_loss(pred.q, gt.q), s)


def quat_conjugate_t(q) -> Tensor:
    return T.mul(q, np.array([1.0, -1.0, -1.0, -1.0]))


def quat_mul_t(a, b) -> Tensor:
    """Differentiable Hamilton product over the last axis."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    w = aw * bw - ax * bx - ay * by - az * bz
    x = aw * bx + ax * bw + ay * bz - az * by
    y = aw * by - ax * bz + ay * bw + az * bx
    z = aw * bz + ax * by - ay * bx + az * bw
    return T.stack([w, x, y, z], axis=-1)


def odom_residuals(pred_t: PoseT, prev: PoseT) -> PoseT:
    """Relative motion implied by the current prediction and the previous pose.

    The previous pose is a constant: no gradient flows into it.
    """
    x_prev = np.asarray(prev.x.data if isinstance(prev.x, Tensor) else prev.x)
    q_prev = np.asarray(prev.q.data if isinstance(prev.q, Tensor) else prev.q)
    r_x = T.sub(pred_t.x, x_prev)
    r_q = quat_mul_t(quat_conjugate_t(Tensor(q_prev)), pred_t.q)
    return PoseT(r_x, r_q)


def odom_loss_terms(residuals: PoseT, gt_rel: PoseT) -> tuple[Tensor, Tensor]:
    return _norm_loss(gt_rel.x, residuals.x), _norm_loss(gt_rel.q, residuals.q)


class GlobalLossParts(NamedTuple):
    total: Tensor
    l_x: Tensor
    l_q: Tensor
    l_x_odom: Tensor | None
    l_q_odom: Tensor | None


def geometric_consistency_parts(pred_t: PoseT, gt_t: PoseT, prev: PoseT, gt_rel: PoseT, s: ScaleParams) -> GlobalLossParts:
    l_x = trans_loss(pred_t.x, gt_t.x)
    l_q = rot_loss(pred_t.q, gt_t.q)
    l_xo, l_qo = odom_loss_terms(odom_residuals(pred_t, prev), gt_rel)
    total = weighted(T.add(l_x, l_xo), T.add(l_q, l_qo), s)
    return GlobalLossParts(total, l_x, l_q, l_xo, l_qo)


def geometric_consistency_loss(pred_t: PoseT, gt_t: PoseT, prev: PoseT, gt_rel: PoseT, s: ScaleParams) -> Tensor:
    return geometric_consistency_parts(pred_t, gt_t, prev, gt_rel, s).total


def vo_loss(rel_pred: PoseT, rel_gt: PoseT, s_vo: ScaleParams) -> Tensor:
    return weighted(trans_loss(rel_pred.x, rel_gt.x), rot_loss(rel_pred.q, rel_gt.q), s_vo)


def global_loss(cfg: LossConfig, pred_t: PoseT, gt_t: PoseT, prev: PoseT | None, gt_rel: PoseT | None, s: ScaleParams) -> GlobalLossParts:
    """Dispatch on ``cfg.mode`` and return the total plus its components."""
    if cfg.mode == "geo":
        if prev is None or gt_rel is None:
            raise ValueError("geometric consistency loss needs the previous pose and groundtruth motion")
        return geometric_consistency_parts(pred_t, gt_t, prev, gt_rel, s)
    l_x = trans_loss(pred_t.x, gt_t.x)
    l_q = rot_loss(pred_t.q, gt_t.q)
    if cfg.mode == "beta":
        total = T.add(l_x, T.scale(l_q, cfg.beta))
    else:
        total = weighted(l_x, l_q, s)
    return GlobalLossParts(total, l_x, l_q, None, None)
