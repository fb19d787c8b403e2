"""Desk-scale directional studies built on the synth / train / eval pipelines.

Each study creates its own datasets and runs under a work directory and
returns plain per-seed numbers; the acceptance tests and ``scripts/`` share
these functions so both always measure the same thing.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import experiments as X
from .data import PreprocessConfig, load_sevenscenes_layout, preprocess
from .evaluation import localization_errors, median
from .model import forward_global, load_checkpoint
from .optim import pose_array
from .tensor import no_grad


def _median_t(report) -> float:
    return next(iter(report.scenes.values()))["median_translation_m"]


def _median_r(report) -> float:
    return next(iter(report.scenes.values()))["median_orientation_deg"]


def _dataset(root: Path, values: dict) -> str:
    path = root / "data"
    if not (path / "manifest.json").exists():
        X.run_synth(X.resolve(values), path, force=True)
    return str(path)


def _train_eval(values: dict, out: Path, split: str):
    cfg = X.resolve(values)
    res = X.run_train(cfg, out)
    return res, X.run_eval(res.checkpoint, cfg.dataset, out / f"eval-{split}", split=split)


def teacher_forced_median(checkpoint, dataset, split: str = "test") -> float:
    """Median translation error when every frame gets its groundtruth previous pose.

    A diagnostic next to the sequential protocol: the gap between the two
    shows how much error the fed-back predictions accumulate.
    """
    params, header = load_checkpoint(checkpoint)
    pre = PreprocessConfig(**header["meta"]["run_config"].get("preprocess", {}))
    mean = header["extras"]["scene_mean"]
    errs = []
    for seq in load_sevenscenes_layout(dataset)[split]:
        gt = pose_array(seq)
        imgs = np.stack([preprocess(r.load_image(), pre, "eval", mean=mean) for r in seq])
        with no_grad():
            out = forward_global(imgs, np.concatenate([gt[:1], gt[:-1]]), params, "eval")
        errs.append(localization_errors(np.concatenate([out.x.data, out.q.data], axis=1), gt).translation)
    return median(np.concatenate(errs))


# ---------------------------------------------------------------- overfit


@dataclass
class OverfitResult:
    median_translation_m: float
    median_orientation_deg: float
    extent_m: float
    seconds: float


def overfit(work, seed: int = 0, iterations: int = 4000, n_frames: int = 64) -> OverfitResult:
    """Default network with the geometric consistency loss, scored on its own training frames."""
    root = Path(work)
    base = {"seed": seed, "synth": {"n_frames": n_frames}}
    ds = _dataset(root, base)
    t0 = time.perf_counter()
    _, rep = _train_eval({**base, "dataset": ds, "preset": ["m4"], "train": {"iterations": iterations}}, root / "m4", "train")
    extent = X.resolve(base).synth_config()[0].extent
    return OverfitResult(_median_t(rep), _median_r(rep), extent, time.perf_counter() - t0)


# ---------------------------------------------------------------- aliasing


@dataclass
class AliasingRow:
    seed: int
    m2_translation_m: float
    m4_translation_m: float
    m2_orientation_deg: float
    m4_orientation_deg: float

    @property
    def m4_better(self) -> bool:
        return self.m4_translation_m < self.m2_translation_m


def aliasing(work, seeds=range(5), iterations: int = 1500, n_frames: int = 64, split: str = "train") -> list[AliasingRow]:
    """M2 (no fusion, scale-weighted loss) against M4 (fusion, geometric consistency loss).

    Every training sequence has a twin in the other aliased region that
    renders identical images, so a single image cannot tell the two apart.
    Scored on the training split, where the ambiguity is guaranteed.
    """
    rows = []
    for seed in seeds:
        root = Path(work) / f"seed{seed}"
        base = {"seed": seed, "preset": ["aliased"], "synth": {"n_frames": n_frames}}
        ds = _dataset(root, base)
        med = {}
        for name in ("m2", "m4"):
            _, rep = _train_eval(
                {"seed": seed, "dataset": ds, "preset": [name], "train": {"iterations": iterations}}, root / name, split
            )
            med[name] = (_median_t(rep), _median_r(rep))
        rows.append(AliasingRow(seed, med["m2"][0], med["m4"][0], med["m2"][1], med["m4"][1]))
    return rows


# ---------------------------------------------------------------- multitask


@dataclass
class MultitaskRow:
    seed: int
    st_translation_m: float
    mt_dual_translation_m: float
    st_orientation_deg: float
    mt_dual_orientation_deg: float
    vo_translation_pct: float | None
    st_teacher_forced_m: float
    mt_dual_teacher_forced_m: float

    @property
    def mt_not_worse(self) -> bool:
        return self.mt_dual_translation_m <= self.st_translation_m


def multitask(
    work,
    seeds=range(5),
    iterations: int = 1500,
    finetune_iterations: int = 1000,
    finetune_lr: float = 1e-4,
    n_sequences: int = 9,
    n_frames: int = 128,
) -> list[MultitaskRow]:
    """Single-task localization (ST) against MT-Dual on the held-out sequence.

    ST and the odometry-only network (VO) train from scratch; MT-Dual starts
    from both (shared stages from ST) and continues with alternating updates
    at a lower learning rate.
    """
    rows = []
    for seed in seeds:
        root = Path(work) / f"seed{seed}"
        base = {"seed": seed, "synth": {"n_sequences": n_sequences, "test_sequences": 1, "n_frames": n_frames}}
        ds = _dataset(root, base)
        common = {**base, "dataset": ds}
        st, st_rep = _train_eval({**common, "preset": ["st"], "train": {"iterations": iterations}}, root / "st", "test")
        vo, vo_rep = _train_eval({**common, "preset": ["vo"], "train": {"iterations": iterations}}, root / "vo", "test")
        mt_values = {
            **common,
            "preset": ["mt-dual"],
            "train": {"iterations": finetune_iterations, "lr": finetune_lr},
            "init": {"global": str(st.checkpoint), "odometry": str(vo.checkpoint)},
        }
        mt, mt_rep = _train_eval(mt_values, root / "mt-dual", "test")
        vo_pct = next(iter(vo_rep.scenes.values()))["vo_translation_pct"]
        rows.append(
            MultitaskRow(
                seed, _median_t(st_rep), _median_t(mt_rep), _median_r(st_rep), _median_r(mt_rep), vo_pct,
                teacher_forced_median(st.checkpoint, ds), teacher_forced_median(mt.checkpoint, ds),
            )
        )
    return rows


def as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
