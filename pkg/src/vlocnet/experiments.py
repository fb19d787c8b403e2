"""Run configuration, named presets and the synth / train / eval / sweep pipelines.

A run is described by one YAML (or JSON) file with these top-level keys, all
optional::

    seed: 0
    preset: m4            # or a list, applied left to right
    dataset: path/to/dataset
    network: {...}        # NetworkConfig fields
    train: {...}          # TrainConfig fields except ``loss``
    loss: {...}           # LossConfig fields
    preprocess: {...}     # PreprocessConfig fields
    init: {global: ckpt, odometry: ckpt}
    synth: {...}          # SyntheticWorldConfig fields plus n_frames

Precedence is defaults, then presets, then file keys, then command-line flags.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (
    DataError,
    PreprocessConfig,
    SyntheticWorldConfig,
    directory_hash,
    load_sevenscenes_layout,
    preprocess,
    save_synthetic,
    synth_generate,
)
from .evaluation import MetricsReport, emit_report, predict_odometry, predict_sequence, scene_metrics, vo_metrics
from .losses import LossConfig
from .model import ConfigError, NetworkConfig, build, copy_params, load_checkpoint, save_checkpoint
from .optim import TrainConfig, build_pairset, fit, normalization_from, pose_array, write_curves

log = logging.getLogger(__name__)

SECTIONS = ("network", "train", "loss", "preprocess", "init", "synth")

_GLOBAL_NET = {"activation": "elu", "fuse_prev_pose_at_stage": 5, "learn_scales": True}

PRESETS: dict[str, dict] = {
    # architecture and loss variants of the global localization network
    "m1": {
        "network": {"activation": "relu", "fuse_prev_pose_at_stage": 0, "learn_scales": False},
        "loss": {"mode": "beta", "beta": 1.0},
        "train": {"strategy": "global"},
    },
    "m2": {
        "network": {"activation": "elu", "fuse_prev_pose_at_stage": 0, "learn_scales": True},
        "loss": {"mode": "sigma"},
        "train": {"strategy": "global"},
    },
    "m3": {
        "network": {**_GLOBAL_NET, "learn_scales": False, "s_x_init": 0.0, "s_q_init": 0.0},
        "loss": {"mode": "geo"},
        "train": {"strategy": "global"},
    },
    "m4": {"network": dict(_GLOBAL_NET), "loss": {"mode": "geo"}, "train": {"strategy": "global"}},
    # single-task networks and multitask initializations
    "st": {"network": dict(_GLOBAL_NET), "loss": {"mode": "geo"}, "train": {"strategy": "global"}},
    "vo": {"network": dict(_GLOBAL_NET), "loss": {"mode": "geo"}, "train": {"strategy": "odometry"}},
    "mt-gloc": {"network": dict(_GLOBAL_NET), "train": {"strategy": "alternating"}, "init": {"require": ["global"]}},
    "mt-vo": {"network": dict(_GLOBAL_NET), "train": {"strategy": "alternating"}, "init": {"require": ["odometry"]}},
    "mt-dual": {
        "network": dict(_GLOBAL_NET),
        "train": {"strategy": "alternating"},
        "init": {"require": ["global", "odometry"]},
    },
    # initial log-variance ranges
    "indoor-scales": {"network": {"s_x_init": 0.0, "s_q_init": -3.0, "s_vo_x_init": 0.0, "s_vo_q_init": -3.0}},
    "outdoor-scales": {"network": {"s_x_init": -3.0, "s_q_init": -6.5, "s_vo_x_init": -3.0, "s_vo_q_init": -6.5}},
    # the full-size schedule, kept for reference runs
    "paper-schedule": {"train": {"iterations": 120000, "batch_size": 32, "lr": 1e-4}},
    # synthetic datasets
    "aliased": {"synth": {"aliasing": True, "n_sequences": 4, "test_sequences": 2}},
}


@dataclass
class RunConfig:
    seed: int = 0
    preset: list = field(default_factory=list)
    dataset: str | None = None
    out: str | None = None
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def to_dict(self, include_out: bool = False) -> dict:
        d = asdict(self)
        if not include_out:
            d.pop("out")
        return d

    def config_hash(self) -> str:
        """Hash of everything that determines a run's outputs (the output path excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # typed views ----------------------------------------------------------

    def network_config(self, **overrides) -> NetworkConfig:
        return _construct(NetworkConfig, {**self.network, **overrides}, "network")

    def train_config(self) -> TrainConfig:
        return _construct(TrainConfig, {**self.train, "seed": self.seed, "loss": self.loss_config()}, "train")

    def loss_config(self) -> LossConfig:
        return _construct(LossConfig, self.loss, "loss")

    def preprocess_config(self) -> PreprocessConfig:
        return _construct(PreprocessConfig, self.preprocess, "preprocess")

    def synth_config(self) -> tuple[SyntheticWorldConfig, int]:
        d = dict(self.synth)
        n_frames = d.pop("n_frames", 64)
        return _construct(SyntheticWorldConfig, d, "synth"), int(n_frames)

    def validate(self) -> None:
        self.network_config().validate()
        self.train_config()
        self.preprocess_config()
        self.synth_config()
        unknown = set(self.init) - {"global", "odometry", "require"}
        if unknown:
            raise ConfigError(f"unknown init keys: {sorted(unknown)}")


def _construct(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} config: {e}") from None


def _merge(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = copy.deepcopy(v)
    return dst


def _as_list(preset) -> list[str]:
    if preset is None:
        return []
    if isinstance(preset, str):
        return [p for p in preset.split(",") if p]
    return list(preset)


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, presets, file values and flag overrides into a RunConfig."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    top = {f.name for f in fields(RunConfig)}
    for src, label in ((file_values, "config file"), (overrides, "overrides")):
        unknown = set(src) - top
        if unknown:
            raise ConfigError(f"unknown keys in {label}: {sorted(unknown)}")
    presets = _as_list(overrides.get("preset", file_values.get("preset")))
    merged: dict = {s: {} for s in SECTIONS}
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        _merge(merged, PRESETS[name])
    for src in (file_values, overrides):
        for s in SECTIONS:
            if s in src:
                if not isinstance(src[s], dict):
                    raise ConfigError(f"section {s!r} must be a mapping")
                _merge(merged[s], src[s])
    scalars = {k: overrides.get(k, file_values.get(k)) for k in ("seed", "dataset", "out")}
    seed = scalars["seed"] if scalars["seed"] is not None else 0
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(seed=seed, preset=presets, dataset=scalars["dataset"], out=scalars["out"], **merged)
    cfg.validate()
    return cfg


def load_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        values = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {p}: {e}") from None
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return values


def write_effective(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.yaml"
    payload = {**cfg.to_dict(), "config_hash": cfg.config_hash(), "library_version": __version__}
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
    return path


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "library_version": __version__}


# ---------------------------------------------------------------- synth


def run_synth(cfg: RunConfig, out, force: bool = False) -> Path:
    world, n_frames = cfg.synth_config()
    if n_frames < 1:
        raise ConfigError("n_frames must be at least 1")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    try:
        ds = synth_generate(world, n_frames, cfg.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if out.exists():
        _clear(out)
    out.mkdir(parents=True, exist_ok=True)
    save_synthetic(ds, out)
    write_effective(cfg, out)
    return out


def _clear(path: Path) -> None:
    for p in sorted(path.rglob("*"), reverse=True):
        if p.is_file() or p.is_symlink():
            p.unlink()
        else:
            p.rmdir()


# ---------------------------------------------------------------- train


@dataclass
class TrainOutputs:
    checkpoint: Path
    curves: Path
    config: Path
    params: object
    dataset_hash: str


def _load_dataset(path) -> tuple[dict, str]:
    if path is None:
        raise DataError("no dataset given")
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset not found: {root}")
    return load_sevenscenes_layout(root), directory_hash(root)


def _apply_init(cfg: RunConfig, params) -> list[str]:
    """Copy pretrained weights into ``params`` as the init section requests.

    The odometry checkpoint is applied first so that the shared stages end up
    coming from the global checkpoint when both are given.
    """
    required = list(cfg.init.get("require", []))
    applied = []
    for task in ("odometry", "global"):
        path = cfg.init.get(task)
        if path is None:
            if task in required:
                raise ConfigError(f"preset needs init.{task}: a checkpoint path")
            continue
        if not Path(path).is_file():
            raise DataError(f"init checkpoint not found: {path}")
        src, header = load_checkpoint(path)
        if src.config.arch_hash() != params.config.arch_hash():
            raise ConfigError(f"init.{task} checkpoint architecture does not match this run")
        names = list(_task_names(src, task))
        copy_params(src, params, names)
        applied.append(task)
    return applied


def _task_names(params, task: str):
    sub = params.subsets()
    groups = ("shared", "global_only", "heads_global", "fc4", "scale_global") if task == "global" else ("shared", "odom_only", "heads_odom", "scale_vo")
    for g in groups:
        yield from sub[g]


def run_train(cfg: RunConfig, out=None, callback=None) -> TrainOutputs:
    """Train one model; every output is written only after training succeeded."""
    out = Path(out if out is not None else cfg.out or "runs/train")
    splits, ds_hash = _load_dataset(cfg.dataset)
    if not splits["train"]:
        raise DataError("dataset has no training sequences")
    pre = cfg.preprocess_config()
    tc = cfg.train_config()
    pairs = build_pairset(splits["train"], pre)
    net = cfg.network_config(**normalization_from(pairs))
    net.validate()
    c = pre.crop
    if net.input_resolution[:2] != (c, c):
        raise ConfigError(f"network input {net.input_resolution[:2]} does not match crop {c}")
    params = build(net, cfg.seed)
    applied = _apply_init(cfg, params)
    result = fit(pairs, params, tc, callback)
    out.mkdir(parents=True, exist_ok=True)
    meta = {**_stamp(cfg), "run_config": cfg.to_dict(), "dataset_hash": ds_hash, "init_applied": applied}
    ckpt = out / "checkpoint.npz"
    save_checkpoint(params, ckpt, meta, extras={"scene_mean": pairs.mean})
    curves = out / "curves.csv"
    write_curves(result.curves, curves)
    conf = write_effective(cfg, out)
    return TrainOutputs(ckpt, curves, conf, params, ds_hash)


# ---------------------------------------------------------------- eval


def run_eval(checkpoint, dataset, out=None, split: str = "test", vo_mode: str = "windowed", expected: RunConfig | None = None) -> MetricsReport:
    """Sequential evaluation of ``checkpoint`` on one split of ``dataset``."""
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    params, header = load_checkpoint(ckpt)
    if expected is not None and expected.network:
        want = expected.network_config().arch_hash()
        if want != header["arch_hash"]:
            raise ConfigError(f"config hash mismatch: run config describes {want}, checkpoint holds {header['arch_hash']}")
    splits, ds_hash = _load_dataset(dataset)
    if split not in splits:
        raise ConfigError(f"unknown split {split!r}")
    seqs = splits[split]
    if not seqs:
        raise DataError(f"dataset has no {split} sequences")
    meta = header.get("meta", {})
    run = meta.get("run_config", {})
    pre = PreprocessConfig(**run.get("preprocess", {}))
    mean = header["extras"].get("scene_mean")
    if mean is None:
        raise ConfigError("checkpoint carries no scene mean image")
    probe = preprocess(seqs[0][0].load_image(), pre, "eval", mean=mean)
    if probe.shape != tuple(params.config.input_resolution):
        raise DataError(f"dataset images preprocess to {probe.shape}, checkpoint expects {params.config.input_resolution}")

    preds, gts, vo_t, vo_r = [], [], [], []
    for seq in seqs:
        preds.append(predict_sequence(params, seq, pre, mean))
        gts.append(pose_array(seq))
        if len(seq) > 1:
            t, r = vo_metrics(predict_odometry(params, seq, pre, mean), gts[-1], mode=vo_mode)
            vo_t.append(t)
            vo_r.append(r)
    scene = Path(dataset).resolve().name
    entry, hist = scene_metrics(np.concatenate(preds), np.concatenate(gts))
    entry["vo_translation_pct"] = float(np.mean(vo_t)) if vo_t else None
    entry["vo_rotation_deg_per_m"] = float(np.mean(vo_r)) if vo_r else None
    metadata = {
        "config_hash": meta.get("config_hash"),
        "arch_hash": header["arch_hash"],
        "seed": meta.get("seed"),
        "library_version": __version__,
        "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
        "dataset_hash": ds_hash,
        "split": split,
        "sequences": [s[0].sequence_id for s in seqs],
        "first_frame_previous_pose": "groundtruth",
        "vo_protocol": {
            "mode": vo_mode,
            "window_fractions_of_path_length": [0.25, 0.5, 0.75, 1.0],
            "stride_frames": 1,
            "aggregation": "mean over sequences of the mean over windows",
        },
    }
    report = MetricsReport({scene: entry}, {scene: hist}, metadata)
    if out is not None:
        emit_report(report, out)
    return report


# ---------------------------------------------------------------- sweeps

SWEEP_COLUMNS = (
    "sweep", "point", "knob", "value", "seed", "median_translation_m", "median_orientation_deg",
    "vo_translation_pct", "vo_rotation_deg_per_m", "dataset_hash", "config_hash",
)


SWEEPS = ("fusion-stage", "sharing-depth", "strategy", "init")


def _variant(base: RunConfig, presets: list[str], **sections) -> RunConfig:
    """``base`` with the given presets and then ``sections`` layered on top."""
    d = base.to_dict(include_out=True)
    for p in presets:
        _merge(d, {k: v for k, v in PRESETS[p].items()})
    _merge(d, sections)
    d["preset"] = list(base.preset) + presets
    return resolve(d)


def _points(name: str, base: RunConfig) -> list[tuple[str, str, object, RunConfig]]:
    if name == "fusion-stage":
        return [(f"fuse{k}", "fuse_prev_pose_at_stage", k, _variant(base, ["m4"], network={"fuse_prev_pose_at_stage": k})) for k in (3, 4, 5)]
    if name == "sharing-depth":
        # a shared stage cannot also host the fusion, so fusion stays at the last stage
        return [
            (f"share{k}", "share_up_to_stage", k, _variant(base, ["m4"], network={"share_up_to_stage": k}, train={"strategy": "alternating"}))
            for k in (2, 3, 4)
        ]
    if name == "strategy":
        return [(s, "strategy", s, _variant(base, ["m4"], train={"strategy": s})) for s in ("joint", "alternating")]
    if name == "init":
        return [(p, "init", p, _variant(base, [p])) for p in ("st", "vo", "mt-gloc", "mt-vo", "mt-dual")]
    raise ConfigError(f"unknown sweep {name!r}; choose from {SWEEPS}")


def run_sweep(name: str, base: RunConfig, out) -> Path:
    """Train and evaluate every grid point of the named sweep with the base seed.

    Points are evaluated on the test split when the dataset has one, else on
    the training split. Writes ``sweep.csv`` plus one sub-directory per point.
    """
    out = Path(out)
    splits, ds_hash = _load_dataset(base.dataset)
    split = "test" if splits["test"] else "train"
    points = _points(name, base)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    trained: dict[str, Path] = {}
    for label, knob, value, cfg in points:
        if name == "init" and label.startswith("mt-"):
            sources = {"global": str(trained["st"]), "odometry": str(trained["vo"])}
            cfg.init = {**cfg.init, **{t: sources[t] for t in cfg.init.get("require", [])}}
        res = run_train(cfg, out / label)
        trained[label] = res.checkpoint
        rep = run_eval(res.checkpoint, base.dataset, out / label / "eval", split=split)
        entry = next(iter(rep.scenes.values()))
        localizes = cfg.train_config().strategy != "odometry"
        rows.append(
            {
                "sweep": name,
                "point": label,
                "knob": knob,
                "value": value,
                "seed": cfg.seed,
                "median_translation_m": entry["median_translation_m"] if localizes else None,
                "median_orientation_deg": entry["median_orientation_deg"] if localizes else None,
                "vo_translation_pct": entry["vo_translation_pct"] if cfg.train_config().strategy != "global" else None,
                "vo_rotation_deg_per_m": entry["vo_rotation_deg_per_m"] if cfg.train_config().strategy != "global" else None,
                "dataset_hash": ds_hash,
                "config_hash": cfg.config_hash(),
            }
        )
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else r[c] for c in SWEEP_COLUMNS])
    write_effective(base, out)
    return path


def read_sweep(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))
