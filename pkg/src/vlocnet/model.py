"""Desk-scale three-stream pose network.

Stage numbering follows the residual-network convention: stage 1 is the stem
convolution, stages 2..K are bottleneck residual stages. The global stream
and the odometry stream that sees the current frame share stages
``1..share_up_to_stage``; the previous-frame odometry stream never shares.
The two odometry streams are concatenated before the last stage.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from . import __version__
from . import tensor as T
from .losses import PoseT, ScaleParams
from .tensor import Tensor

CHECKPOINT_FORMAT = "vlocnet-ckpt/1"
GROUPS = ("shared", "global_only", "odom_only", "heads")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_resolution: tuple[int, int, int] = (32, 32, 3)
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    units_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    share_up_to_stage: int = 3
    fuse_prev_pose_at_stage: int = 5  # 0 disables previous-pose fusion
    fuse_channels: int = 4
    fc1_dim: int = 128
    dropout_keep: float = 0.8
    activation: str = "elu"
    # fixed output de-normalization, set from the training data
    translation_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_scale: float = 1.0
    rel_translation_scale: float = 1.0
    s_x_init: float = 0.0
    s_q_init: float = -3.0
    s_vo_x_init: float = 0.0
    s_vo_q_init: float = -3.0
    learn_scales: bool = True
    init_gain: float = 1.0

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        if isinstance(self.units_per_stage, int):
            self.units_per_stage = (self.units_per_stage,) * len(self.stage_channels)
        self.units_per_stage = tuple(int(v) for v in self.units_per_stage)
        self.translation_offset = tuple(float(v) for v in self.translation_offset)
        self.validate()

    @property
    def num_stages(self) -> int:
        return 1 + len(self.stage_channels)

    def validate(self) -> None:
        if len(self.input_resolution) != 3 or min(self.input_resolution) <= 0:
            raise ConfigError(f"input_resolution must be (H, W, C) positive, got {self.input_resolution}")
        if not self.stage_channels or len(self.stage_channels) != len(self.units_per_stage):
            raise ConfigError("stage_channels and units_per_stage must be non-empty and equally long")
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least two residual stages (the odometry merge precedes the last)")
        if min(self.stage_channels) < 4 or any(c % 4 for c in self.stage_channels):
            raise ConfigError("stage channels must be positive multiples of 4 (bottleneck width c/4)")
        if min(self.units_per_stage) < 1 or self.stem_channels <= 0 or self.fc1_dim <= 0:
            raise ConfigError("units, stem channels and fc1_dim must be positive")
        if not 0 <= self.share_up_to_stage <= self.num_stages - 1:
            raise ConfigError(
                f"share_up_to_stage must be in [0, {self.num_stages - 1}] (the last stage follows the odometry merge)"
            )
        f = self.fuse_prev_pose_at_stage
        if f != 0 and not 2 <= f <= self.num_stages:
            raise ConfigError(f"fuse_prev_pose_at_stage must be 0 or in [2, {self.num_stages}]")
        if f and self.fuse_channels <= 0:
            raise ConfigError("fuse_channels must be positive")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError("dropout_keep must be in (0, 1]")
        if self.activation not in ("elu", "relu"):
            raise ConfigError("activation must be 'elu' or 'relu'")
        if self.translation_scale <= 0 or self.rel_translation_scale <= 0:
            raise ConfigError("translation scales must be positive")
        if min(min(hw) for hw in self.spatial_sizes()) < 1:
            raise ConfigError("input resolution too small for the number of downsampling stages")

    def stage_stride(self, k: int) -> int:
        if k == 1:
            return self.stem_stride
        return 1 if k == 2 else 2

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Output (H, W) of each stage 1..K."""
        h, w = self.input_resolution[:2]
        out = []
        for k in range(1, self.num_stages + 1):
            s = self.stage_stride(k)
            h, w = -(-h // s), -(-w // s)
            out.append((h, w))
        return out

    def stage_out_channels(self, k: int) -> int:
        return self.stem_channels if k == 1 else self.stage_channels[k - 2]

    @property
    def fuse_dim(self) -> int:
        """Width D of the previous-pose inner-product layer."""
        if not self.fuse_prev_pose_at_stage:
            return 0
        h, w = self.spatial_sizes()[self.fuse_prev_pose_at_stage - 1]
        return h * w * self.fuse_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def arch_hash(self) -> str:
        """Hash of the architecture-defining fields (ignores scale initial values)."""
        keys = (
            "input_resolution", "stem_channels", "stem_stride", "stage_channels", "units_per_stage",
            "share_up_to_stage", "fuse_prev_pose_at_stage", "fuse_channels", "fc1_dim", "activation",
        )
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    config: NetworkConfig
    shared: dict[str, Tensor] = field(default_factory=dict)
    global_only: dict[str, Tensor] = field(default_factory=dict)
    odom_only: dict[str, Tensor] = field(default_factory=dict)
    heads: dict[str, Tensor] = field(default_factory=dict)
    scale_global: ScaleParams | None = None
    scale_vo: ScaleParams | None = None

    def group(self, name: str) -> dict[str, Tensor]:
        return getattr(self, name)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        """Every parameter as (qualified name, tensor), in a fixed order."""
        for g in GROUPS:
            for k, v in self.group(g).items():
                yield f"{g}/{k}", v
        for tag, s in (("scale_global", self.scale_global), ("scale_vo", self.scale_vo)):
            yield f"{tag}/s_x", s.s_x
            yield f"{tag}/s_q", s.s_q

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named() if v.requires_grad}

    def subsets(self) -> dict[str, dict[str, Tensor]]:
        """Finer partition used by the optimizers and the partition checks."""
        out = {
            "shared": {f"shared/{k}": v for k, v in self.shared.items()},
            "global_only": {f"global_only/{k}": v for k, v in self.global_only.items()},
            "odom_only": {f"odom_only/{k}": v for k, v in self.odom_only.items()},
            "heads_global": {f"heads/{k}": v for k, v in self.heads.items() if k.startswith("global.")},
            "heads_odom": {f"heads/{k}": v for k, v in self.heads.items() if k.startswith("odom.")},
            "fc4": {f"heads/{k}": v for k, v in self.heads.items() if k.startswith("fc4.")},
            "scale_global": {"scale_global/s_x": self.scale_global.s_x, "scale_global/s_q": self.scale_global.s_q},
            "scale_vo": {"scale_vo/s_x": self.scale_vo.s_x, "scale_vo/s_q": self.scale_vo.s_q},
        }
        return out

    def task_params(self, task: str) -> dict[str, Tensor]:
        """Trainable parameters reachable from the given task's loss."""
        sub = self.subsets()
        if task == "global":
            names = ("shared", "global_only", "heads_global", "fc4", "scale_global")
        elif task == "odometry":
            names = ("shared", "odom_only", "heads_odom", "scale_vo")
        else:
            raise ValueError(f"unknown task {task!r}")
        out = {}
        for n in names:
            out.update({k: v for k, v in sub[n].items() if v.requires_grad})
        return out

    def count(self) -> int:
        return int(sum(v.size for _, v in self.named() if v.requires_grad))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named()}

    def zero_grad(self) -> None:
        for _, v in self.named():
            v.grad = None


# ---------------------------------------------------------------- construction


class _Builder:
    def __init__(self, rng: np.random.Generator, gain: float):
        self.rng = rng
        self.gain = gain

    def conv(self, d: dict, name: str, k: int, cin: int, cout: int, gain: float = 1.0) -> None:
        std = self.gain * gain / np.sqrt(k * k * cin)
        d[f"{name}.w"] = Tensor(self.rng.normal(0.0, std, (k, k, cin, cout)), requires_grad=True, name=name)

    def affine(self, d: dict, name: str, c: int) -> None:
        d[f"{name}.scale"] = Tensor(np.ones(c), requires_grad=True)
        d[f"{name}.bias"] = Tensor(np.zeros(c), requires_grad=True)

    def fc(self, d: dict, name: str, cin: int, cout: int, bias=None) -> None:
        std = self.gain / np.sqrt(cin)
        d[f"{name}.w"] = Tensor(self.rng.normal(0.0, std, (cin, cout)), requires_grad=True)
        b = np.zeros(cout) if bias is None else np.asarray(bias, dtype=np.float64)
        d[f"{name}.b"] = Tensor(b, requires_grad=True)

    def unit(self, d: dict, prefix: str, cin: int, cout: int, stride: int) -> None:
        mid = cout // 4
        self.conv(d, f"{prefix}.conv1", 1, cin, mid)
        self.affine(d, f"{prefix}.aff1", mid)
        self.conv(d, f"{prefix}.conv2", 3, mid, mid)
        self.affine(d, f"{prefix}.aff2", mid)
        # branch output starts small so stacked residual sums stay O(1)
        self.conv(d, f"{prefix}.conv3", 1, mid, cout, gain=0.5)
        self.affine(d, f"{prefix}.aff3", cout)
        if cin != cout or stride != 1:
            self.conv(d, f"{prefix}.proj", 1, cin, cout)
            self.affine(d, f"{prefix}.affp", cout)

    def stage(self, d: dict, prefix: str, cfg: NetworkConfig, k: int, cin: int) -> None:
        if k == 1:
            self.conv(d, f"{prefix}.stem", 3, cin, cfg.stem_channels)
            self.affine(d, f"{prefix}.stem_aff", cfg.stem_channels)
            return
        cout = cfg.stage_out_channels(k)
        for j in range(cfg.units_per_stage[k - 2]):
            self.unit(d, f"{prefix}.u{j + 1}", cin if j == 0 else cout, cout, cfg.stage_stride(k) if j == 0 else 1)


def build(config: NetworkConfig, seed: int) -> ModelParams:
    """Deterministically initialize every parameter of the three streams."""
    config.validate()
    rng = np.random.default_rng(seed)
    b = _Builder(rng, config.init_gain)
    p = ModelParams(config)
    K = config.num_stages
    S = config.share_up_to_stage
    cin = config.input_resolution[2]

    # global stream (and the shared prefix of the current-frame odometry stream)
    c = cin
    for k in range(1, K + 1):
        target = p.shared if k <= S else p.global_only
        b.stage(target, f"s{k}", config, k, c)
        if k == config.fuse_prev_pose_at_stage:
            ck = config.stage_out_channels(k)
            b.conv(p.global_only, "fuse.proj", 1, ck + config.fuse_channels, ck, gain=0.5)
            b.affine(p.global_only, "fuse.aff", ck)
        c = config.stage_out_channels(k)

    # odometry, current frame: stages after the shared prefix, up to the merge
    c = config.stage_out_channels(S) if S else cin
    for k in range(S + 1, K):
        b.stage(p.odom_only, f"cur.s{k}", config, k, c)
        c = config.stage_out_channels(k)
    # odometry, previous frame: never shared
    c = cin
    for k in range(1, K):
        b.stage(p.odom_only, f"prev.s{k}", config, k, c)
        c = config.stage_out_channels(k)
    b.stage(p.odom_only, f"merge.s{K}", config, K, 2 * config.stage_out_channels(K - 1))

    c_last = config.stage_out_channels(K)
    for task in ("global", "odom"):
        b.fc(p.heads, f"{task}.fc1", c_last, config.fc1_dim)
        b.fc(p.heads, f"{task}.fc2", config.fc1_dim, 3)
        b.fc(p.heads, f"{task}.fc3", config.fc1_dim, 4, bias=[1.0, 0.0, 0.0, 0.0])
    if config.fuse_prev_pose_at_stage:
        b.fc(p.heads, "fc4", 7, config.fuse_dim)

    p.scale_global = ScaleParams.create(config.s_x_init, config.s_q_init, config.learn_scales, "scale_global")
    p.scale_vo = ScaleParams.create(config.s_vo_x_init, config.s_vo_q_init, config.learn_scales, "scale_vo")
    return p


# ---------------------------------------------------------------- forward


class _Ctx:
    def __init__(self, cfg: NetworkConfig, train: bool, rng: np.random.Generator | None):
        self.cfg = cfg
        self.train = train
        self.rng = rng
        self.act: Callable[[Tensor], Tensor] = T.elu if cfg.activation == "elu" else T.relu


def _check_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise T.NonFiniteError(f"non-finite activations after {where}")
    return x


def _unit(ctx: _Ctx, d: dict, prefix: str, x: Tensor, stride: int) -> Tensor:
    h = T.conv2d(x, d[f"{prefix}.conv1.w"], 1)
    h = ctx.act(T.affine(h, d[f"{prefix}.aff1.scale"], d[f"{prefix}.aff1.bias"]))
    h = T.conv2d(h, d[f"{prefix}.conv2.w"], stride)
    h = ctx.act(T.affine(h, d[f"{prefix}.aff2.scale"], d[f"{prefix}.aff2.bias"]))
    h = T.conv2d(h, d[f"{prefix}.conv3.w"], 1)
    h = T.affine(h, d[f"{prefix}.aff3.scale"], d[f"{prefix}.aff3.bias"])
    if f"{prefix}.proj.w" in d:
        sc = T.conv2d(x, d[f"{prefix}.proj.w"], stride)
        sc = T.affine(sc, d[f"{prefix}.affp.scale"], d[f"{prefix}.affp.bias"])
    else:
        sc = x
    return ctx.act(T.add(h, sc))


def _fuse(ctx: _Ctx, p: ModelParams, x: Tensor, prev_pose: np.ndarray) -> Tensor:
    cfg = ctx.cfg
    n, h, w, _ = x.shape
    v = _normalize_prev(cfg, prev_pose)
    f = T.add(T.matmul(Tensor(v), p.heads["fc4.w"]), p.heads["fc4.b"])
    f = T.reshape(f, (n, h, w, cfg.fuse_channels))
    g = p.global_only
    y = T.conv2d(T.concat([x, f], axis=-1), g["fuse.proj.w"], 1)
    y = T.affine(y, g["fuse.aff.scale"], g["fuse.aff.bias"])
    return T.add(x, y)


def _normalize_prev(cfg: NetworkConfig, prev_pose) -> np.ndarray:
    v = np.asarray(prev_pose, dtype=np.float64).reshape(-1, 7).copy()
    v[:, :3] = (v[:, :3] - np.asarray(cfg.translation_offset)) / cfg.translation_scale
    return v


def _stage(ctx: _Ctx, d: dict, prefix: str, k: int, x: Tensor, after_first=None) -> Tensor:
    cfg = ctx.cfg
    if k == 1:
        x = T.conv2d(x, d[f"{prefix}.stem.w"], cfg.stem_stride)
        return ctx.act(T.affine(x, d[f"{prefix}.stem_aff.scale"], d[f"{prefix}.stem_aff.bias"]))
    for j in range(cfg.units_per_stage[k - 2]):
        x = _unit(ctx, d, f"{prefix}.u{j + 1}", x, cfg.stage_stride(k) if j == 0 else 1)
        if j == 0 and after_first is not None:
            x = after_first(x)
    return _check_finite(x, f"stage {k}")


def _global_stage_params(p: ModelParams, k: int) -> dict:
    return p.shared if k <= p.config.share_up_to_stage else p.global_only


def _head(ctx: _Ctx, p: ModelParams, task: str, feat: Tensor, t_scale: float, t_offset) -> PoseT:
    hd = p.heads
    z = T.global_avg_pool(feat)
    z = ctx.act(T.add(T.matmul(z, hd[f"{task}.fc1.w"]), hd[f"{task}.fc1.b"]))
    z = T.dropout(z, ctx.cfg.dropout_keep, ctx.rng, ctx.train)
    x = T.add(T.matmul(z, hd[f"{task}.fc2.w"]), hd[f"{task}.fc2.b"])
    x = T.add(T.scale(x, t_scale), np.asarray(t_offset, dtype=np.float64))
    q = T.add(T.matmul(z, hd[f"{task}.fc3.w"]), hd[f"{task}.fc3.b"])
    q = T.div(q, T.reshape(T.l2_norm(q, axis=-1), (q.shape[0], 1)))
    return PoseT(x, q)


def _as_batch(img) -> Tensor:
    img = T.as_tensor(img)
    if img.ndim == 3:
        img = T.reshape(img, (1,) + img.shape)
    return img


def _check_input(cfg: NetworkConfig, img: Tensor) -> None:
    if tuple(img.shape[1:]) != cfg.input_resolution:
        raise T.ShapeError(f"image shape {img.shape[1:]} does not match config {cfg.input_resolution}")


def _odom_rest(ctx: _Ctx, p: ModelParams, shared_feat: Tensor, img_prev: Tensor) -> PoseT:
    cfg = p.config
    K = cfg.num_stages
    x = shared_feat
    for k in range(cfg.share_up_to_stage + 1, K):
        x = _stage(ctx, p.odom_only, f"cur.s{k}", k, x)
    y = img_prev
    for k in range(1, K):
        y = _stage(ctx, p.odom_only, f"prev.s{k}", k, y)
    z = _stage(ctx, p.odom_only, f"merge.s{K}", K, T.concat([x, y], axis=-1))
    return _head(ctx, p, "odom", z, cfg.rel_translation_scale, (0.0, 0.0, 0.0))


def _prep(p: ModelParams, mode: str, rng) -> _Ctx:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return _Ctx(p.config, mode == "train", rng)


def _shared_with_fusion(ctx: _Ctx, p: ModelParams, img: Tensor, prev_pose) -> tuple[Tensor, Tensor]:
    """Run the shared prefix once; return (global-stream features, odometry features).

    When fusion happens inside the shared prefix the streams diverge there.
    """
    cfg = p.config
    S, F = cfg.share_up_to_stage, cfg.fuse_prev_pose_at_stage
    if not F or F > S:
        x = img
        for k in range(1, S + 1):
            x = _stage(ctx, p.shared, f"s{k}", k, x)
        return x, x
    # shared stages up to the fusion stage's first unit are common
    x = img
    for k in range(1, F):
        x = _stage(ctx, p.shared, f"s{k}", k, x)
    units = cfg.units_per_stage[F - 2]
    x = _unit(ctx, p.shared, f"s{F}.u1", x, cfg.stage_stride(F))
    g = _fuse(ctx, p, x, prev_pose)
    o = x
    for j in range(1, units):
        g = _unit(ctx, p.shared, f"s{F}.u{j + 1}", g, 1)
        o = _unit(ctx, p.shared, f"s{F}.u{j + 1}", o, 1)
    for k in range(F + 1, S + 1):
        g = _stage(ctx, p.shared, f"s{k}", k, g)
        o = _stage(ctx, p.shared, f"s{k}", k, o)
    return g, o


def forward_global(img, prev_pose, params: ModelParams, mode: str = "eval", rng=None) -> PoseT:
    """Global pose from the current image and the previous pose (N x 7 or 7)."""
    cfg = params.config
    img = _as_batch(img)
    _check_input(cfg, img)
    ctx = _prep(params, mode, rng)
    prev = _checked_prev(prev_pose, img.shape[0]) if cfg.fuse_prev_pose_at_stage else None
    g, _ = _shared_with_fusion(ctx, params, img, prev)
    return _global_tail(ctx, params, g, prev)


def _global_tail(ctx: _Ctx, p: ModelParams, x: Tensor, prev) -> PoseT:
    cfg = p.config
    for k in range(cfg.share_up_to_stage + 1, cfg.num_stages + 1):
        hook = (lambda y: _fuse(ctx, p, y, prev)) if k == cfg.fuse_prev_pose_at_stage else None
        x = _stage(ctx, p.global_only, f"s{k}", k, x, hook)
    return _head(ctx, p, "global", x, cfg.translation_scale, cfg.translation_offset)


def _checked_prev(prev_pose, n: int) -> np.ndarray:
    v = np.asarray(prev_pose, dtype=np.float64).reshape(-1, 7)
    if v.shape[0] == 1 and n > 1:
        v = np.repeat(v, n, axis=0)
    if v.shape[0] != n:
        raise T.ShapeError(f"previous pose batch {v.shape[0]} does not match image batch {n}")
    qn = np.linalg.norm(v[:, 3:], axis=1)
    if np.any(np.abs(qn - 1.0) > 1e-6):
        raise ValueError("previous pose quaternion must be unit")
    return v


def forward_odometry(img_t, img_prev, params: ModelParams, mode: str = "eval", rng=None) -> PoseT:
    """Relative motion between the previous and current frames."""
    cfg = params.config
    img_t, img_prev = _as_batch(img_t), _as_batch(img_prev)
    _check_input(cfg, img_t)
    _check_input(cfg, img_prev)
    ctx = _prep(params, mode, rng)
    x = img_t
    for k in range(1, cfg.share_up_to_stage + 1):
        x = _stage(ctx, params.shared, f"s{k}", k, x)
    return _odom_rest(ctx, params, x, img_prev)


def forward_both(img_t, img_prev, prev_pose, params: ModelParams, mode: str = "train", rng=None) -> tuple[PoseT, PoseT]:
    """Global and odometry outputs computing the shared prefix on ``img_t`` once."""
    cfg = params.config
    img_t, img_prev = _as_batch(img_t), _as_batch(img_prev)
    _check_input(cfg, img_t)
    _check_input(cfg, img_prev)
    ctx = _prep(params, mode, rng)
    prev = _checked_prev(prev_pose, img_t.shape[0]) if cfg.fuse_prev_pose_at_stage else None
    g, o = _shared_with_fusion(ctx, params, img_t, prev)
    glob = _global_tail(ctx, params, g, prev)
    odom = _odom_rest(ctx, params, o, img_prev)
    return glob, odom


# ---------------------------------------------------------------- checkpoints


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


EXTRA_PREFIX = "__extra__/"


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(a, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(params: ModelParams, path, meta: dict | None = None, extras: dict[str, np.ndarray] | None = None) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps (byte-deterministic).

    ``extras`` holds auxiliary arrays (for example the scene mean image) that
    travel with the weights but are not parameters.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "library_version": __version__,
        "config": params.config.to_dict(),
        "arch_hash": params.config.arch_hash(),
        "learnable": {k: bool(v.requires_grad) for k, v in params.named()},
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "__header__.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name, t in params.named():
            _zip_write(zf, f"{name}.npy", _npy_bytes(t.data))
        for name in sorted(extras or {}):
            _zip_write(zf, f"{EXTRA_PREFIX}{name}.npy", _npy_bytes(np.asarray(extras[name])))


def read_checkpoint_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("__header__.json"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {header.get('format')!r}")
    return header


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    header = read_checkpoint_header(path)
    cfg = NetworkConfig.from_dict(header["config"])
    params = build(cfg, 0)
    learnable = header["learnable"]
    with zipfile.ZipFile(path) as zf:
        stored = {n[:-4] for n in zf.namelist() if n.endswith(".npy") and not n.startswith(EXTRA_PREFIX)}
        expected = {k for k, _ in params.named()}
        if stored != expected:
            raise ConfigError(f"checkpoint parameters do not match config: {sorted(stored ^ expected)[:5]}")
        for name, t in params.named():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(np.float64)
            t.requires_grad = bool(learnable.get(name, True))
        header["extras"] = {
            n[len(EXTRA_PREFIX) : -4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
            for n in zf.namelist()
            if n.startswith(EXTRA_PREFIX)
        }
    return params, header


def copy_params(src: ModelParams, dst: ModelParams, names) -> None:
    """Copy the values of the qualified parameter ``names`` from ``src`` into ``dst``."""
    s = dict(src.named())
    d = dict(dst.named())
    for n in names:
        if n in s and n in d and s[n].shape == d[n].shape:
            d[n].data = s[n].data.copy()
