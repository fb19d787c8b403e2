"""Dataset ingestion, preprocessing, consecutive-pair assembly and a synthetic
textured-floor world.

On-disk layout (shared by real 7-Scenes scenes and generated data)::

    <root>/seq-01/frame-000000.color.png
    <root>/seq-01/frame-000000.pose.txt     # 4x4 camera-to-world, row-major
    <root>/TrainSplit.txt                   # one "sequenceN" per line
    <root>/TestSplit.txt
    <root>/manifest.json                    # generated datasets only
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import cv2
import numpy as np
from PIL import Image

from . import __version__
from .geometry import (
    NonOrthonormalRotationError,
    Pose,
    RelativeMotion,
    angular_distance,
    canonicalize,
    compose,
    matrix_to_pose,
    pose_to_matrix,
    quat_mul,
    quat_inverse,
    relative_motion,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class DataError(Exception):
    pass


class PoseFileError(DataError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class MissingPoseFileError(PoseFileError):
    pass


class MalformedPoseFileError(PoseFileError):
    pass


class NonOrthonormalPoseError(PoseFileError):
    pass


class TumFormatError(DataError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class FrameRecord:
    sequence_id: str
    frame_index: int
    pose: Pose
    image_path: str | None = None
    timestamp: float | None = None
    image: np.ndarray | None = field(default=None, repr=False)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise DataError(f"frame {self.sequence_id}/{self.frame_index} has no image")
            self.image = np.asarray(Image.open(self.image_path).convert("RGB"))
        return self.image


# ---------------------------------------------------------------- 7-Scenes-style layout


def read_pose_file(path) -> Pose:
    path = Path(path)
    if not path.is_file():
        raise MissingPoseFileError(path, "pose file not found")
    try:
        m = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise MalformedPoseFileError(path, f"unparseable matrix ({e})") from None
    if m.shape != (4, 4):
        raise MalformedPoseFileError(path, f"expected 4x4 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise MalformedPoseFileError(path, "non-finite entries")
    try:
        return matrix_to_pose(m).canonical()
    except NonOrthonormalRotationError as e:
        raise NonOrthonormalPoseError(path, str(e)) from None


def write_pose_file(path, pose: Pose) -> None:
    m = pose_to_matrix(pose)
    Path(path).write_text("".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in m))


def _read_split(path: Path) -> list[int]:
    out = []
    for line in path.read_text().split():
        m = re.search(r"(\d+)$", line.strip())
        if m is None:
            raise DataError(f"{path}: cannot parse sequence entry {line!r}")
        out.append(int(m.group(1)))
    return out


_FRAME_RE = re.compile(r"frame-(\d+)\.pose\.txt$")


def load_sequence_dir(seq_dir, sequence_id: str | None = None) -> list[FrameRecord]:
    seq_dir = Path(seq_dir)
    sid = sequence_id or seq_dir.name
    indices = set()
    for p in seq_dir.iterdir():
        m = re.match(r"frame-(\d+)\.", p.name)
        if m:
            indices.add(int(m.group(1)))
    records = []
    for idx in sorted(indices):
        stem = seq_dir / f"frame-{idx:06d}"
        pose = read_pose_file(f"{stem}.pose.txt")
        img = Path(f"{stem}.color.png")
        records.append(FrameRecord(sid, idx, pose, str(img) if img.exists() else None))
    return records


def load_sevenscenes_layout(root) -> dict[str, list[list[FrameRecord]]]:
    """Read a scene directory; returns {"train": [...], "test": [...]} lists of sequences."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    splits = {}
    for name, fname in (("train", "TrainSplit.txt"), ("test", "TestSplit.txt")):
        path = root / fname
        if not path.exists():
            splits[name] = []
            continue
        seqs = []
        for n in _read_split(path):
            d = root / f"seq-{n:02d}"
            if not d.is_dir():
                raise DataError(f"{d}: sequence listed in {fname} is missing")
            seqs.append(load_sequence_dir(d))
        splits[name] = seqs
    if not splits["train"] and not splits["test"]:
        raise DataError(f"{root}: no TrainSplit.txt/TestSplit.txt found")
    return splits


def write_sevenscenes_layout(root, splits: dict[str, list[list[FrameRecord]]], write_images: bool = True) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seq_no = 0
    listing = {}
    for name in ("train", "test"):
        nums = []
        for seq in splits.get(name, []):
            seq_no += 1
            d = root / f"seq-{seq_no:02d}"
            d.mkdir(exist_ok=True)
            for r in seq:
                stem = d / f"frame-{r.frame_index:06d}"
                write_pose_file(f"{stem}.pose.txt", r.pose)
                if write_images and (r.image is not None or r.image_path):
                    _write_png(f"{stem}.color.png", r.load_image())
            nums.append(seq_no)
        listing[name] = nums
    (root / "TrainSplit.txt").write_text("".join(f"sequence{n}\n" for n in listing["train"]))
    (root / "TestSplit.txt").write_text("".join(f"sequence{n}\n" for n in listing["test"]))


def _write_png(path, img: np.ndarray) -> None:
    # fixed encoder settings, no metadata: identical arrays give identical bytes
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", optimize=False, compress_level=6)


# ---------------------------------------------------------------- TUM pose lists


def load_tum_format(path, sequence_id: str | None = None) -> list[FrameRecord]:
    """Lines ``timestamp tx ty tz qx qy qz qw``; ``#`` starts a comment."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise TumFormatError(path, lineno, f"expected 8 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise TumFormatError(path, lineno, "non-numeric field") from None
        if not all(np.isfinite(vals)):
            raise TumFormatError(path, lineno, "non-finite field")
        t, tx, ty, tz, qx, qy, qz, qw = vals
        try:
            q = canonicalize([qw, qx, qy, qz])
        except ValueError:
            raise TumFormatError(path, lineno, "degenerate quaternion") from None
        rows.append((t, Pose([tx, ty, tz], q)))
    stamps = [r[0] for r in rows]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        warnings.warn(f"{path}: timestamps not monotone; sorting (stable)", stacklevel=2)
    order = sorted(range(len(rows)), key=lambda i: rows[i][0])
    sid = sequence_id or path.stem
    return [FrameRecord(sid, i, rows[j][1], timestamp=rows[j][0]) for i, j in enumerate(order)]


def write_tum_format(path, records: Sequence[FrameRecord]) -> None:
    lines = []
    for i, r in enumerate(records):
        t = r.timestamp if r.timestamp is not None else float(i)
        w, x, y, z = r.pose.q
        tx, ty, tz = r.pose.x
        lines.append(" ".join(f"{v:.17g}" for v in (t, tx, ty, tz, x, y, z, w)))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    rescale_short_side: int = 32
    crop: int = 32

    def __post_init__(self):
        if self.crop > self.rescale_short_side:
            raise ValueError("crop must not exceed the rescaled short side")


def rescaled_size(h: int, w: int, short_side: int) -> tuple[int, int]:
    """(H, W) after scaling the shorter side to ``short_side``; long side rounds half up."""
    if h <= w:
        return short_side, int(np.floor(w * short_side / h + 0.5))
    return int(np.floor(h * short_side / w + 0.5)), short_side


def rescale(img: np.ndarray, short_side: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    nh, nw = rescaled_size(h, w, short_side)
    if (nh, nw) == (h, w):
        return img
    out = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)
    return out.reshape(nh, nw, -1)


def to_float(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def center_offsets(h: int, w: int, crop: int) -> tuple[int, int]:
    return (h - crop) // 2, (w - crop) // 2


def scene_mean(images: Sequence[np.ndarray], config: PreprocessConfig) -> np.ndarray:
    """Per-pixel, per-channel mean at the rescaled resolution."""
    acc = None
    for img in images:
        r = rescale(to_float(img), config.rescale_short_side)
        acc = r.copy() if acc is None else acc + r
    if acc is None:
        raise DataError("cannot compute a scene mean from zero images")
    return acc / len(images)


def preprocess(img, config: PreprocessConfig, mode: str, rng: np.random.Generator | None = None, mean=None) -> np.ndarray:
    """Rescale, subtract the scene mean, crop (random in train mode, center in eval)."""
    r = rescale(to_float(img), config.rescale_short_side)
    if mean is not None:
        r = r - mean
    h, w = r.shape[:2]
    c = config.crop
    if h < c or w < c:
        raise DataError(f"image {h}x{w} smaller than crop {c} after rescale")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs an rng")
        oy, ox = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
    elif mode == "eval":
        oy, ox = center_offsets(h, w, c)
    else:
        raise ValueError("mode must be 'train' or 'eval'")
    return r[oy : oy + c, ox : ox + c]


# ---------------------------------------------------------------- pairs


class Pair(NamedTuple):
    current: FrameRecord
    previous: FrameRecord
    rel_gt: RelativeMotion


def make_pairs(sequence: Sequence[FrameRecord]) -> list[Pair]:
    out = []
    for prev, cur in zip(sequence, sequence[1:]):
        if cur.sequence_id != prev.sequence_id:
            raise DataError("pair crosses a sequence boundary")
        if cur.frame_index <= prev.frame_index:
            raise DataError(f"non-consecutive frames {prev.frame_index} -> {cur.frame_index}")
        out.append(Pair(cur, prev, relative_motion(cur.pose, prev.pose)))
    return out


def make_all_pairs(sequences: Sequence[Sequence[FrameRecord]]) -> list[Pair]:
    out = []
    for seq in sequences:
        out.extend(make_pairs(seq))
    return out


# ---------------------------------------------------------------- synthetic world


@dataclass
class SyntheticWorldConfig:
    extent: float = 4.0
    height_range: tuple[float, float] = (0.0, 0.4)
    floor_distance: float = 2.0
    max_step_translation: float = 0.12
    max_step_rotation_deg: float = 6.0
    max_yaw_deg: float = 60.0
    max_tilt_deg: float = 10.0
    resolution: int = 32
    fov_deg: float = 60.0
    texture_seed: int = 7
    n_waves: int = 24
    aliasing: bool = False
    alias_gap: float = 0.8
    n_sequences: int = 1
    test_sequences: int = 0

    def __post_init__(self):
        self.height_range = tuple(float(v) for v in self.height_range)
        if self.extent <= 0 or self.max_step_translation <= 0 or self.resolution < 4:
            raise ValueError("invalid synthetic world configuration")
        if self.aliasing and not 0 < self.alias_gap < self.extent:
            raise ValueError("alias_gap must lie inside the world extent")

    def alias_regions(self) -> list[dict] | None:
        """Two disjoint x-intervals rendered through the same texture window."""
        if not self.aliasing:
            return None
        half = (self.extent - self.alias_gap) / 2
        return [
            {"axis": "x", "lo": 0.0, "hi": half},
            {"axis": "x", "lo": half + self.alias_gap, "hi": self.extent},
        ]

    @property
    def alias_offset(self) -> float:
        return (self.extent + self.alias_gap) / 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["height_range"] = list(self.height_range)
        return d


def _euler_quat(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    # q = Rz(yaw) * Ry(pitch) * Rx(roll)
    return np.array(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ]
    )


class SyntheticWorld:
    """A camera looking along +z at a textured plane ``z = floor_distance``.

    Identity rotation looks straight at the floor; image intensity is a smooth
    procedural texture at the ray's floor intersection, with mild shading that
    depends on camera height and tilt.
    """

    def __init__(self, config: SyntheticWorldConfig):
        self.config = config
        rng = np.random.default_rng(config.texture_seed)
        n = config.n_waves
        freq = rng.uniform(0.25, 1.6, n)
        ang = rng.uniform(0, np.pi, n)
        self.k = 2 * np.pi * np.stack([freq * np.cos(ang), freq * np.sin(ang)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, (n, 3))
        self.amp = rng.uniform(0.5, 1.0, (n, 3)) / np.sqrt(n)
        r = config.resolution
        f = 0.5 * r / np.tan(np.radians(config.fov_deg) / 2)
        u, v = np.meshgrid(np.arange(r) + 0.5 - r / 2, np.arange(r) + 0.5 - r / 2)
        self.rays = np.stack([u / f, v / f, np.ones_like(u)], axis=-1)

    def _render_pose(self, x: np.ndarray, q: np.ndarray) -> np.ndarray:
        from .geometry import quat_to_matrix

        rot = quat_to_matrix(q)
        d = self.rays @ rot.T
        t = (self.config.floor_distance - x[2]) / d[..., 2]
        gx = x[0] + t * d[..., 0]
        gy = x[1] + t * d[..., 1]
        arg = gx[..., None] * self.k[:, 0] + gy[..., None] * self.k[:, 1]
        tex = np.einsum("hwnc,nc->hwc", np.sin(arg[..., None] + self.phase), self.amp)
        shade = 1.0 + 0.15 * (x[2] - 0.2) + 0.1 * d[..., 1:2] / d[..., 2:3]
        img = 0.5 + 0.35 * tex * shade
        return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    def alias_shift(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.aliasing and x[0] >= cfg.alias_regions()[1]["lo"]:
            return x - np.array([cfg.alias_offset, 0.0, 0.0])
        return x

    def render(self, pose: Pose) -> np.ndarray:
        return self._render_pose(self.alias_shift(pose.x), pose.q)


@dataclass
class SyntheticDataset:
    config: SyntheticWorldConfig
    seed: int
    n_frames: int
    splits: dict[str, list[list[FrameRecord]]]

    def alias_twins(self) -> list[list[str]]:
        """Pairs of sequence ids whose frames render identically."""
        if not self.config.aliasing:
            return []
        ids = [seq[0].sequence_id for split in ("train", "test") for seq in self.splits.get(split, []) if seq]
        return [[a, b] for a, b in zip(ids[0::2], ids[1::2])]

    def manifest(self) -> dict:
        frames = []
        for split, seqs in self.splits.items():
            for s_i, seq in enumerate(seqs):
                for r in seq:
                    frames.append(
                        {
                            "split": split,
                            "sequence": r.sequence_id,
                            "frame": r.frame_index,
                            "x": r.pose.x.tolist(),
                            "q": r.pose.q.tolist(),
                        }
                    )
        return {
            "manifest_version": MANIFEST_VERSION,
            "library_version": __version__,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "n_frames": self.n_frames,
            "aliasing_regions": self.config.alias_regions(),
            "alias_offset": self.config.alias_offset if self.config.aliasing else None,
            "alias_twins": self.alias_twins(),
            "frames": frames,
        }


def _trajectory(cfg: SyntheticWorldConfig, n_frames: int, rng: np.random.Generator, x_range: tuple[float, float] | None = None) -> list[Pose]:
    ext = cfg.extent
    lo, hi = cfg.height_range
    margin = 0.1 * ext
    x_lo, x_hi = x_range if x_range is not None else (margin, ext - margin)
    pos = np.array([rng.uniform(x_lo, x_hi), rng.uniform(margin, ext - margin), rng.uniform(lo, hi)])
    max_yaw, max_tilt = np.radians(cfg.max_yaw_deg), np.radians(cfg.max_tilt_deg)
    ang = np.array([rng.uniform(-max_yaw, max_yaw) * 0.5, 0.0, 0.0])
    vel = rng.standard_normal(3) * np.array([1, 1, 0.2])
    vel *= 0.8 * cfg.max_step_translation / np.linalg.norm(vel)
    dang_max = np.radians(cfg.max_step_rotation_deg) / 3.0
    poses = [Pose(pos, canonicalize(_euler_quat(*ang)))]
    dang = np.zeros(3)
    bounds_lo = np.array([x_lo, margin, lo])
    bounds_hi = np.array([x_hi, ext - margin, hi])
    limits = np.array([max_yaw, max_tilt, max_tilt])
    for _ in range(n_frames - 1):
        for _attempt in range(50):
            v = 0.85 * vel + 0.35 * cfg.max_step_translation * rng.standard_normal(3) * np.array([1, 1, 0.3])
            speed = np.linalg.norm(v)
            if speed > cfg.max_step_translation:
                v *= cfg.max_step_translation / speed
            nxt = pos + v
            out = (nxt < bounds_lo) | (nxt > bounds_hi)
            v[out] = -v[out]
            nxt = pos + v
            d = np.clip(0.7 * dang + 0.5 * dang_max * rng.standard_normal(3), -dang_max, dang_max)
            a = ang + d
            over = np.abs(a) > limits
            d[over] = -d[over]
            a = ang + d
            if np.all(nxt >= bounds_lo) and np.all(nxt <= bounds_hi) and np.all(np.abs(a) <= limits):
                break
        else:
            raise DataError("trajectory could not stay inside the world extent")
        q_next = canonicalize(_euler_quat(*a))
        prev = poses[-1]
        rel = RelativeMotion(nxt - prev.x, quat_mul(quat_inverse(prev.q), q_next))
        poses.append(compose(prev, rel).canonical())
        pos, ang, vel, dang = poses[-1].x.copy(), a, v, d
    return poses


def synth_generate(config: SyntheticWorldConfig, n_frames: int, seed: int) -> SyntheticDataset:
    """Deterministic trajectories and rendered images.

    ``config.n_sequences`` sequences are generated; the last
    ``config.test_sequences`` of them form the test split. With aliasing on,
    sequences come in twins: an odd-numbered sequence walks inside the first
    aliased region and the following one replays it shifted by
    ``alias_offset`` into the second region, so both render identical images.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    if config.test_sequences >= config.n_sequences and config.n_sequences > 0 and config.test_sequences > 0:
        raise ValueError("need at least one training sequence")
    if config.aliasing and (config.n_sequences % 2 or config.test_sequences % 2):
        raise ValueError("aliased datasets need even sequence counts (sequences come in twins)")
    world = SyntheticWorld(config)
    rng = np.random.default_rng(seed)
    seqs = []
    for s in range(config.n_sequences):
        if config.aliasing and s % 2:
            shift = np.array([config.alias_offset, 0.0, 0.0])
            poses = [Pose(r.pose.x + shift, r.pose.q) for r in seqs[-1]]
        elif config.aliasing:
            region = config.alias_regions()[0]
            poses = _trajectory(config, n_frames, rng, (max(region["lo"], 0.1 * config.extent), region["hi"]))
        else:
            poses = _trajectory(config, n_frames, rng)
        sid = f"seq-{s + 1:02d}"
        seqs.append([FrameRecord(sid, i, p, image=world.render(p)) for i, p in enumerate(poses)])
    n_test = config.test_sequences
    splits = {"train": seqs[: len(seqs) - n_test], "test": seqs[len(seqs) - n_test :]}
    return SyntheticDataset(config, seed, n_frames, splits)


def save_synthetic(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    write_sevenscenes_layout(out, ds.splits)
    (out / "manifest.json").write_text(json.dumps(ds.manifest(), sort_keys=True, indent=1) + "\n")


def directory_hash(root) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def motion_magnitudes(seq: Sequence[FrameRecord]) -> list[tuple[float, float]]:
    """(translation m, rotation deg) of every consecutive step."""
    out = []
    for pair in make_pairs(seq):
        out.append((float(np.linalg.norm(pair.rel_gt.x_rel)), angular_distance(pair.rel_gt.q_rel, [1.0, 0, 0, 0])))
    return out
