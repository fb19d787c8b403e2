"""Localization and odometry metrics, sequential inference and report files.

Report JSON layout (``schema_version`` equals the library version)::

    {"schema_version": ..., "metadata": {...},
     "scenes": {name: {"median_translation_m", "median_orientation_deg", "n_frames",
                       "vo_translation_pct", "vo_rotation_deg_per_m",
                       "translation_errors", "orientation_errors"}},
     "histograms": {name: {"translation": [[thr, frac], ...], "orientation": [...]}}}
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import FrameRecord, PreprocessConfig, preprocess
from .geometry import angular_distance, compose, Pose, RelativeMotion
from .model import ModelParams, forward_global, forward_odometry
from .tensor import no_grad

VO_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class PoseErrors:
    translation: np.ndarray
    orientation: np.ndarray
    frame_ids: list = field(default_factory=list)


def _pose_rows(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=np.float64).reshape(-1, 7)
    rows = [np.concatenate([p.x, p.q]) if isinstance(p, Pose) else np.asarray(p, dtype=np.float64) for p in poses]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def localization_errors(predictions, groundtruth, frame_ids=None) -> PoseErrors:
    p, g = _pose_rows(predictions), _pose_rows(groundtruth)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} groundtruth poses")
    trans = np.linalg.norm(p[:, :3] - g[:, :3], axis=1)
    rot = np.atleast_1d(angular_distance(p[:, 3:], g[:, 3:])) if len(p) else np.zeros(0)
    return PoseErrors(trans, rot, list(frame_ids) if frame_ids is not None else list(range(len(p))))


def median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.size
    if n == 0:
        raise ValueError("median of an empty sequence")
    mid = n // 2
    return float(v[mid]) if n % 2 else float((v[mid - 1] + v[mid]) / 2)


def cumulative_histogram(errors, thresholds) -> np.ndarray:
    """Fraction of errors <= each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    t = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors given")
    if t.size == 0 or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be non-empty and strictly increasing")
    if t[-1] < e[-1]:
        raise ValueError("final threshold must be >= the largest error")
    return np.searchsorted(e, t, side="right") / e.size


def default_thresholds(errors, n: int = 20) -> np.ndarray:
    top = float(np.max(errors)) if np.size(errors) else 0.0
    if top <= 0:
        return np.array([0.0])
    thr = top * np.arange(1, n + 1) / n
    thr[-1] = top  # top * n / n may round below top
    return thr


def _integrate(start: Pose, rels: np.ndarray) -> Pose:
    p = start
    for r in rels:
        p = compose(p, RelativeMotion(r[:3], r[3:]))
    return p


def vo_metrics(predicted_rel, gt_poses, fractions: Sequence[float] = VO_FRACTIONS, stride: int = 1, mode: str = "windowed") -> tuple[float, float]:
    """(translation error %, rotation error deg/m) of accumulated relative motion.

    ``predicted_rel[i]`` is the motion from frame i to frame i+1, as
    (x_rel, q_rel). Windowed mode integrates the predictions from every
    ``stride``-th start frame over path-length windows equal to ``fractions`` of
    the sequence's path length, starting from the groundtruth pose.
    """
    rel = _pose_rows(predicted_rel)
    gt = _pose_rows(gt_poses)
    if len(rel) != len(gt) - 1:
        raise ValueError(f"need one relative prediction per consecutive pair: {len(rel)} vs {len(gt) - 1}")
    steps = np.linalg.norm(np.diff(gt[:, :3], axis=0), axis=1)
    if mode == "per-pair":
        t_err, r_err = [], []
        for i, d in enumerate(steps):
            if d <= 0:
                warnings.warn(f"zero-length step at pair {i} skipped", stacklevel=2)
                continue
            gt_rel = _gt_rel(gt, i, i + 1)
            t_err.append(100.0 * np.linalg.norm(rel[i, :3] - gt_rel.x_rel) / d)
            r_err.append(angular_distance(rel[i, 3:] / np.linalg.norm(rel[i, 3:]), gt_rel.q_rel) / d)
        return _avg(t_err), _avg(r_err)
    if mode != "windowed":
        raise ValueError("mode must be 'windowed' or 'per-pair'")
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    total = dist[-1]
    if total <= 0:
        warnings.warn("sequence has zero path length; no VO windows", stacklevel=2)
        return 0.0, 0.0
    t_err, r_err = [], []
    for frac in fractions:
        length = frac * total
        if length <= 0:
            warnings.warn("zero-length window skipped", stacklevel=2)
            continue
        for i in range(0, len(gt), stride):
            # first frame whose path distance from i reaches the window length
            j = int(np.searchsorted(dist, dist[i] + length, side="left"))
            if j >= len(gt) or j <= i:
                continue
            seg = dist[j] - dist[i]
            if seg <= 0:
                continue
            start = Pose(gt[i, :3], gt[i, 3:])
            end = _integrate(start, rel[i:j])
            t_err.append(100.0 * np.linalg.norm(end.x - gt[j, :3]) / seg)
            r_err.append(angular_distance(end.q, gt[j, 3:] / np.linalg.norm(gt[j, 3:])) / seg)
    return _avg(t_err), _avg(r_err)


def _gt_rel(gt: np.ndarray, i: int, j: int) -> RelativeMotion:
    from .geometry import relative_motion

    return relative_motion(Pose(gt[j, :3], gt[j, 3:]), Pose(gt[i, :3], gt[i, 3:]))


def _avg(v) -> float:
    return float(np.mean(v)) if len(v) else 0.0


# ---------------------------------------------------------------- inference


def predict_sequence(params: ModelParams, seq: Sequence[FrameRecord], pre: PreprocessConfig, mean: np.ndarray) -> np.ndarray:
    """Global poses (N x 7) frame by frame.

    Each frame receives the previous frame's prediction as its previous-pose
    input; frame 0 receives its own groundtruth pose.
    """
    imgs = np.stack([preprocess(r.load_image(), pre, "eval", mean=mean) for r in seq])
    with no_grad():
        return _predict_sequence(params, seq, imgs)


def _predict_sequence(params: ModelParams, seq: Sequence[FrameRecord], imgs: np.ndarray) -> np.ndarray:
    if not params.config.fuse_prev_pose_at_stage:
        dummy = np.tile([0, 0, 0, 1.0, 0, 0, 0], (len(seq), 1))
        out = forward_global(imgs, dummy, params, "eval")
        return np.concatenate([out.x.data, out.q.data], axis=1)
    prev = np.concatenate([seq[0].pose.x, seq[0].pose.q])
    rows = []
    for i in range(len(seq)):
        out = forward_global(imgs[i : i + 1], prev, params, "eval")
        row = np.concatenate([out.x.data[0], out.q.data[0]])
        rows.append(row)
        prev = row
    return np.array(rows)


def predict_odometry(params: ModelParams, seq: Sequence[FrameRecord], pre: PreprocessConfig, mean: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Relative motions (N-1 x 7) for each consecutive pair."""
    if len(seq) < 2:
        return np.zeros((0, 7))
    imgs = np.stack([preprocess(r.load_image(), pre, "eval", mean=mean) for r in seq])
    rows = []
    for s in range(0, len(seq) - 1, chunk):
        e = min(s + chunk, len(seq) - 1)
        with no_grad():
            out = forward_odometry(imgs[s + 1 : e + 1], imgs[s:e], params, "eval")
        rows.append(np.concatenate([out.x.data, out.q.data], axis=1))
    return np.concatenate(rows)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    scenes: dict
    histograms: dict
    metadata: dict
    schema_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "metadata": self.metadata,
            "scenes": self.scenes,
            "histograms": self.histograms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["scenes"], d["histograms"], d["metadata"], d["schema_version"])

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def scene_metrics(pred_poses, gt_poses, pred_rel=None, vo_mode: str = "windowed") -> tuple[dict, dict]:
    errs = localization_errors(pred_poses, gt_poses)
    entry = {
        "n_frames": int(len(errs.translation)),
        "median_translation_m": median(errs.translation),
        "median_orientation_deg": median(errs.orientation),
        "translation_errors": [float(v) for v in errs.translation],
        "orientation_errors": [float(v) for v in errs.orientation],
        "vo_translation_pct": None,
        "vo_rotation_deg_per_m": None,
    }
    if pred_rel is not None and len(pred_rel):
        t, r = vo_metrics(pred_rel, gt_poses, mode=vo_mode)
        entry["vo_translation_pct"] = t
        entry["vo_rotation_deg_per_m"] = r
    hist = {}
    for comp, e in (("translation", errs.translation), ("orientation", errs.orientation)):
        thr = default_thresholds(e)
        hist[comp] = [[float(a), float(b)] for a, b in zip(thr, cumulative_histogram(e, thr))]
    return entry, hist


def emit_report(report: MetricsReport, destination) -> dict[str, Path]:
    """Write report.json, medians.csv and histogram.csv into ``destination``."""
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    paths = {"json": dest / "report.json", "medians": dest / "medians.csv", "histogram": dest / "histogram.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    with open(paths["medians"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "scene", "component", "median", "unit"])
        for scene in sorted(report.scenes):
            s = report.scenes[scene]
            w.writerow([report.schema_version, scene, "translation", repr(s["median_translation_m"]), "m"])
            w.writerow([report.schema_version, scene, "orientation", repr(s["median_orientation_deg"]), "deg"])
    with open(paths["histogram"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "component", "threshold", "fraction"])
        for scene in sorted(report.histograms):
            for comp in ("translation", "orientation"):
                for thr, frac in report.histograms[scene][comp]:
                    w.writerow([scene, comp, repr(thr), repr(frac)])
    return paths


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
