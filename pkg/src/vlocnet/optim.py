"""Adam and the multitask training strategies (joint, alternating, single-task)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import FrameRecord, PreprocessConfig, make_all_pairs, rescale, scene_mean, to_float
from .losses import LossConfig, PoseT, global_loss, vo_loss
from .model import ModelParams, forward_both, forward_global, forward_odometry

log = logging.getLogger(__name__)

STRATEGIES = ("joint", "alternating", "global", "odometry")
CURVE_COLUMNS = ("step", "L_total", "L_x", "L_q", "L_x_odom", "L_q_odom", "L_vo", "s_x", "s_q", "s_x_vo", "s_q_vo")


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class AdamState:
    params: dict[str, T.Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.data))
            self.v.setdefault(k, np.zeros_like(p.data))


def adam_step(state: AdamState, grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update of every parameter the state owns.

    Owned parameters missing from ``grads`` are updated with a zero gradient.
    """
    for k, g in grads.items():
        if k in state.params and not np.all(np.isfinite(g)):
            raise DivergenceError(state.step, f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in state.params.items():
        g = grads.get(k)
        m, v = state.m[k], state.v[k]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        if not m.any():
            continue
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    strategy: str = "alternating"
    iterations: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    log_every: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class TrainStrategy:
    mode: str
    optimizers: dict[str, AdamState]


def make_strategy(mode: str, params: ModelParams, cfg: TrainConfig) -> TrainStrategy:
    hyper = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    if mode == "joint":
        all_params = dict(params.task_params("global"))
        all_params.update(params.task_params("odometry"))
        return TrainStrategy(mode, {"joint": AdamState(all_params, **hyper)})
    if mode == "alternating":
        return TrainStrategy(
            mode,
            {
                "global": AdamState(params.task_params("global"), **hyper),
                "odometry": AdamState(params.task_params("odometry"), **hyper),
            },
        )
    if mode in ("global", "odometry"):
        return TrainStrategy(mode, {mode: AdamState(params.task_params(mode), **hyper)})
    raise ValueError(f"unknown strategy {mode!r}")


# ---------------------------------------------------------------- training data


@dataclass
class Batch:
    img_t: np.ndarray
    img_prev: np.ndarray
    pose_t: np.ndarray  # (N, 7) x, q
    pose_prev: np.ndarray
    rel: np.ndarray  # (N, 7) x_rel, q_rel
    seq_ids: tuple = ()
    frame_ids: tuple = ()

    def __post_init__(self):
        n = self.img_t.shape[0]
        if not (self.img_prev.shape[0] == self.pose_t.shape[0] == self.pose_prev.shape[0] == self.rel.shape[0] == n):
            raise ValueError("batch arrays disagree on batch size")
        if self.seq_ids:
            for (sc, sp), (fc, fp) in zip(self.seq_ids, self.frame_ids):
                if sc != sp or fc <= fp:
                    from .data import DataError

                    raise DataError(f"non-consecutive pair {sp}/{fp} -> {sc}/{fc}")


@dataclass
class PairSet:
    """Consecutive training pairs with rescaled, mean-subtracted images."""

    img_t: np.ndarray
    img_prev: np.ndarray
    pose_t: np.ndarray
    pose_prev: np.ndarray
    rel: np.ndarray
    seq_ids: list
    frame_ids: list
    preprocess: PreprocessConfig
    mean: np.ndarray

    def __len__(self):
        return self.img_t.shape[0]

    def batch(self, idx: np.ndarray, rng: np.random.Generator, train: bool = True) -> Batch:
        c = self.preprocess.crop
        h, w = self.img_t.shape[1:3]
        if train and (h > c or w > c):
            oy = rng.integers(0, h - c + 1, size=len(idx))
            ox = rng.integers(0, w - c + 1, size=len(idx))
            # same crop window for both frames of a pair keeps their relative geometry
            it = np.stack([self.img_t[i, y : y + c, x : x + c] for i, y, x in zip(idx, oy, ox)])
            ip = np.stack([self.img_prev[i, y : y + c, x : x + c] for i, y, x in zip(idx, oy, ox)])
        else:
            y, x = (h - c) // 2, (w - c) // 2
            it = self.img_t[idx, y : y + c, x : x + c]
            ip = self.img_prev[idx, y : y + c, x : x + c]
        return Batch(
            it,
            ip,
            self.pose_t[idx],
            self.pose_prev[idx],
            self.rel[idx],
            tuple(self.seq_ids[i] for i in idx),
            tuple(self.frame_ids[i] for i in idx),
        )


def pose_array(records: Sequence[FrameRecord]) -> np.ndarray:
    return np.array([np.concatenate([r.pose.x, r.pose.q]) for r in records])


def build_pairset(sequences: Sequence[Sequence[FrameRecord]], pre: PreprocessConfig, mean: np.ndarray | None = None) -> PairSet:
    pairs = make_all_pairs(sequences)
    if not pairs:
        from .data import DataError

        raise DataError("no consecutive pairs: every sequence needs at least two frames")
    if mean is None:
        mean = scene_mean([r.load_image() for seq in sequences for r in seq], pre)
    cache: dict[int, np.ndarray] = {}

    def img(r: FrameRecord) -> np.ndarray:
        key = id(r)
        if key not in cache:
            cache[key] = rescale(to_float(r.load_image()), pre.rescale_short_side) - mean
        return cache[key]

    return PairSet(
        img_t=np.stack([img(p.current) for p in pairs]),
        img_prev=np.stack([img(p.previous) for p in pairs]),
        pose_t=pose_array([p.current for p in pairs]),
        pose_prev=pose_array([p.previous for p in pairs]),
        rel=np.array([np.concatenate([p.rel_gt.x_rel, p.rel_gt.q_rel]) for p in pairs]),
        seq_ids=[(p.current.sequence_id, p.previous.sequence_id) for p in pairs],
        frame_ids=[(p.current.frame_index, p.previous.frame_index) for p in pairs],
        preprocess=pre,
        mean=mean,
    )


# ---------------------------------------------------------------- steps


def _split(a: np.ndarray) -> PoseT:
    return PoseT(a[:, :3], a[:, 3:])


def _grads_by_name(params: ModelParams, grads: dict) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in params.named() if t in grads}


def _global_loss(batch: Batch, params: ModelParams, loss_cfg: LossConfig, pred: PoseT):
    fused = params.config.fuse_prev_pose_at_stage != 0
    prev = _split(batch.pose_prev) if loss_cfg.mode == "geo" or fused else None
    rel = _split(batch.rel) if loss_cfg.mode == "geo" else None
    return global_loss(loss_cfg, pred, _split(batch.pose_t), prev, rel, params.scale_global)


def _row(params: ModelParams, parts=None, l_vo=None, total=None) -> dict:
    sx, sq = params.scale_global.values()
    svx, svq = params.scale_vo.values()
    f = lambda t: None if t is None else float(t.data)  # noqa: E731
    return {
        "L_total": total,
        "L_x": f(parts.l_x) if parts else None,
        "L_q": f(parts.l_q) if parts else None,
        "L_x_odom": f(parts.l_x_odom) if parts else None,
        "L_q_odom": f(parts.l_q_odom) if parts else None,
        "L_vo": f(l_vo),
        "s_x": sx,
        "s_q": sq,
        "s_x_vo": svx,
        "s_q_vo": svq,
    }


def _check(loss: T.Tensor, step: int) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(step, "non-finite loss")


def train_step_joint(batch: Batch, params: ModelParams, strategy: TrainStrategy, loss_cfg: LossConfig, rng=None) -> dict:
    """L_global + L_vo, one backward pass, one Adam step over everything."""
    opt = strategy.optimizers["joint"]
    with T.Tape():
        g, o = forward_both(batch.img_t, batch.img_prev, batch.pose_prev, params, "train", rng)
        parts = _global_loss(batch, params, loss_cfg, g)
        l_vo = vo_loss(o, _split(batch.rel), params.scale_vo)
        total = T.add(parts.total, l_vo)
        _check(total, opt.step)
        grads = T.backward(total)
    row = _row(params, parts, l_vo, float(total.data))
    adam_step(opt, _grads_by_name(params, grads))
    return row


def _single(batch: Batch, params: ModelParams, opt: AdamState, task: str, loss_cfg: LossConfig, rng) -> dict:
    with T.Tape():
        if task == "global":
            pred = forward_global(batch.img_t, batch.pose_prev, params, "train", rng)
            parts = _global_loss(batch, params, loss_cfg, pred)
            loss, l_vo = parts.total, None
        else:
            pred = forward_odometry(batch.img_t, batch.img_prev, params, "train", rng)
            parts, loss = None, vo_loss(pred, _split(batch.rel), params.scale_vo)
            l_vo = loss
        _check(loss, opt.step)
        grads = T.backward(loss)
    row = _row(params, parts, l_vo, float(loss.data))
    adam_step(opt, _grads_by_name(params, grads))
    return row


def train_step_alternating(batch: Batch, params: ModelParams, strategy: TrainStrategy, phase: str, loss_cfg: LossConfig, rng=None) -> dict:
    """Backpropagate one task's loss and step only that task's optimizer."""
    if phase not in ("global", "odometry"):
        raise ValueError("phase must be 'global' or 'odometry'")
    return _single(batch, params, strategy.optimizers[phase], phase, loss_cfg, rng)


def train_step(batch: Batch, params: ModelParams, strategy: TrainStrategy, step: int, loss_cfg: LossConfig, rng=None) -> dict:
    if strategy.mode == "joint":
        return train_step_joint(batch, params, strategy, loss_cfg, rng)
    if strategy.mode == "alternating":
        return train_step_alternating(batch, params, strategy, "global" if step % 2 == 0 else "odometry", loss_cfg, rng)
    return _single(batch, params, strategy.optimizers[strategy.mode], strategy.mode, loss_cfg, rng)


@dataclass
class FitResult:
    params: ModelParams
    curves: list[dict]
    strategy: TrainStrategy


def fit(data: PairSet, params: ModelParams, cfg: TrainConfig, callback=None) -> FitResult:
    """Run ``cfg.iterations`` steps; batch order, crops and dropout all come from ``cfg.seed``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    strategy = make_strategy(cfg.strategy, params, cfg)
    n = len(data)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    curves = []
    for step in range(cfg.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        batch = data.batch(idx, rng, train=True)
        try:
            row = train_step(batch, params, strategy, step, cfg.loss, rng)
        except T.NonFiniteError as e:
            raise DivergenceError(step, str(e)) from None
        row = {"step": step, **row}
        curves.append(row)
        if callback is not None:
            callback(step, row)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, row["L_total"])
    return FitResult(params, curves, strategy)


def write_curves(curves: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curves:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in CURVE_COLUMNS])


def read_curves(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in row.items()})
    return out


def normalization_from(data: PairSet) -> dict:
    """Output de-normalization constants for the translation heads."""
    x = data.pose_t[:, :3]
    spread = float(np.sqrt(np.mean(np.sum((x - x.mean(0)) ** 2, axis=1) / 3)))
    rel_spread = float(np.sqrt(np.mean(np.sum(data.rel[:, :3] ** 2, axis=1) / 3)))
    return {
        "translation_offset": tuple(float(v) for v in x.mean(0)),
        "translation_scale": max(spread, 1e-3),
        "rel_translation_scale": max(rel_spread, 1e-3),
    }
