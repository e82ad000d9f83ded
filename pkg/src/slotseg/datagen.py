"""Synthetic multi-object sequences with exact instance and depth ground truth.

Objects are flat shapes at fixed z-depths moving on bouncing linear
trajectories over a gradient or tiled-texture background; a camera pan scrolls
the background texture. Rendering uses the painter's algorithm back to front,
so each pixel's instance id is exactly the nearest covering object.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"DPF1"
HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved

SHAPES = ("disk", "square", "triangle", "sprite")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    x: float  # center, pixels, at t=0
    y: float
    vx: float  # pixels / frame
    vy: float
    radius: float  # half-extent in pixels
    z: float  # constant depth, meters-like
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    pan_vx: float = 0.0  # background pixels / frame
    pan_vy: float = 0.0
    background: str = "gradient"  # gradient | texture
    background_seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 10:
            raise ValueError(f"num_objects must be in [1, 10], got {len(self.objects)}")
        for obj in self.objects:
            if obj.shape not in SHAPES:
                raise ValueError(f"unknown shape {obj.shape!r}")
            if obj.z <= 0:
                raise ValueError("object depth must be positive")


def random_scene_spec(
    rng: np.random.Generator,
    h: int,
    w: int,
    num_objects: int | tuple[int, int] = (2, 4),
    moving: bool = True,
    pan: bool = False,
    background: str | None = None,
) -> SceneSpec:
    if isinstance(num_objects, tuple):
        n = int(rng.integers(num_objects[0], num_objects[1] + 1))
    else:
        n = num_objects
    objs = []
    zs = rng.permutation(np.linspace(1.0, 4.0, n) + rng.uniform(-0.1, 0.1, n))
    for i in range(n):
        radius = float(rng.uniform(0.10, 0.20) * min(h, w))
        speed = float(rng.uniform(0.5, 2.0)) if moving else 0.0
        angle = float(rng.uniform(0, 2 * math.pi))
        objs.append(
            ObjectSpec(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                x=float(rng.uniform(radius, w - radius)),
                y=float(rng.uniform(radius, h - radius)),
                vx=speed * math.cos(angle),
                vy=speed * math.sin(angle),
                radius=radius,
                z=float(zs[i]),
                color=tuple(rng.uniform(0.2, 1.0, 3).tolist()),
            )
        )
    bg = background or ("texture" if rng.random() < 0.5 else "gradient")
    return SceneSpec(
        objects=tuple(objs),
        pan_vx=float(rng.uniform(0.5, 2.0)) if pan else 0.0,
        pan_vy=0.0,
        background=bg,
        background_seed=int(rng.integers(1 << 31)),
    )


def _bounce(p: float, v: float, t: int, lo: float, hi: float) -> float:
    """Position after t frames of constant speed with reflection at [lo, hi]."""
    if hi <= lo:
        return lo
    span = hi - lo
    q = (p - lo + v * t) % (2 * span)
    q = abs(q)
    if q > span:
        q = 2 * span - q
    return lo + q


def _object_mask(obj: ObjectSpec, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    r = obj.radius
    if obj.shape == "disk":
        return dx**2 + dy**2 <= r**2
    if obj.shape in ("square", "sprite"):
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upright triangle: apex at top, base at bottom
    inside = (dy >= -r) & (dy <= r)
    half_width = (dy + r) / 2.0
    return inside & (np.abs(dx) <= half_width)


def _background(
    spec: SceneSpec, t: int, h: int, w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (rgb (h, w, 3) in [0, 1], raw depth (h, w) > 0)."""
    yy, xx = np.mgrid[0:h, 0:w]
    off_x = spec.pan_vx * t
    off_y = spec.pan_vy * t
    if spec.background == "texture":
        rng = np.random.default_rng(spec.background_seed)
        tile = rng.uniform(0.1, 0.9, size=(8, 8, 3))
        cell = max(4, min(h, w) // 8)
        ix = ((xx + off_x) // cell).astype(np.int64) % 8
        iy = ((yy + off_y) // cell).astype(np.int64) % 8
        rgb = tile[iy, ix]
    else:
        u = ((xx + off_x) % w) / w
        v = ((yy + off_y) % h) / h
        rgb = np.stack([0.2 + 0.5 * u, 0.3 + 0.4 * v, 0.6 - 0.3 * u], axis=-1)
    # floor-like ramp: nearer at the bottom of the image
    depth = 10.0 - 4.0 * (yy + 0.5) / h
    return rgb.astype(np.float32), depth.astype(np.float32)


def render_sequence(
    spec: SceneSpec, num_frames: int, h: int, w: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Render (rgb (h,w,3), raw_depth (h,w), labels (h,w)) per frame.

    Instance ids (1-based, by spec order) are stable across frames; overlaps
    resolve to the object with the smaller z.
    """
    frames = []
    order = sorted(range(len(spec.objects)), key=lambda i: -spec.objects[i].z)
    rng_texture = np.random.default_rng(spec.background_seed + 1)
    sprite_tiles = [
        rng_texture.uniform(0.1, 1.0, size=(4, 4, 3)) for _ in spec.objects
    ]
    for t in range(num_frames):
        rgb, depth = _background(spec, t, h, w)
        rgb = rgb.copy()
        labels = np.zeros((h, w), dtype=np.int64)
        for i in order:  # far to near
            obj = spec.objects[i]
            cx = _bounce(obj.x, obj.vx, t, obj.radius, w - obj.radius)
            cy = _bounce(obj.y, obj.vy, t, obj.radius, h - obj.radius)
            mask = _object_mask(obj, cx, cy, h, w)
            if not mask.any():
                continue
            if obj.shape == "sprite":
                yy, xx = np.nonzero(mask)
                tile = sprite_tiles[i]
                color = tile[(yy // 4) % 4, (xx // 4) % 4] * np.asarray(obj.color)
                rgb[yy, xx] = color
            else:
                rgb[mask] = obj.color
            depth[mask] = obj.z
            labels[mask] = i + 1
        frames.append((rgb.astype(np.float32), depth.astype(np.float32), labels))
    return frames


# ---------------------------------------------------------------------------
# scene-relative depth normalization
# ---------------------------------------------------------------------------


def depth_normalize(raw_depth, mu: float, sigma: float):
    """Log-normalize raw depth into (0, 1): 1 / (1 + exp((ln(raw) - mu) / sigma)).

    Strictly decreasing in raw depth; mu and sigma are dataset-level
    statistics of ln(depth).
    """
    raw = np.asarray(raw_depth, dtype=np.float64)
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if (raw <= 0).any():
        raise ValueError("raw depth must be strictly positive")
    return 1.0 / (1.0 + np.exp((np.log(raw) - mu) / sigma))


def log_depth_stats(depths: list[np.ndarray]) -> tuple[float, float]:
    """Mean and std of ln(depth) over a stack of raw depth maps."""
    logs = np.concatenate([np.log(np.asarray(d, dtype=np.float64)).ravel() for d in depths])
    return float(logs.mean()), float(logs.std())


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


class DatasetError(RuntimeError):
    pass


@dataclass
class SequenceRecord:
    seq_id: str
    rgb: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    raw_depth: np.ndarray  # (T, H, W) float32 > 0
    labels: np.ndarray  # (T, H, W) int64


@dataclass
class DatasetManifest:
    mu: float
    sigma: float
    h: int
    w: int
    t: int
    splits: dict[str, list[str]] = field(default_factory=dict)

    def format(self) -> str:
        lines = [
            f"mu={self.mu!r}",
            f"sigma={self.sigma!r}",
            f"h={self.h}",
            f"w={self.w}",
            f"t={self.t}",
        ]
        for split in sorted(self.splits):
            lines.append(f"count_{split}={len(self.splits[split])}")
            lines.append(f"split_{split}={','.join(self.splits[split])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        values: dict[str, str] = {}
        for line in text.splitlines():
            if line.strip() and "=" in line:
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        splits = {}
        for key, val in values.items():
            if key.startswith("split_"):
                splits[key[len("split_"):]] = [s for s in val.split(",") if s]
        return cls(
            mu=float(values["mu"]),
            sigma=float(values["sigma"]),
            h=int(values["h"]),
            w=int(values["w"]),
            t=int(values["t"]),
            splits=splits,
        )


def _write_depth(path: Path, depth: np.ndarray):
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(DEPTH_MAGIC, w, h, 0))
        f.write(depth.astype("<f4").tobytes())


def _read_depth(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, w, h, _ = HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    expected = HEADER.size + 4 * w * h
    if len(data) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(h, w).copy()


def write_dataset(root, sequences_by_split: dict[str, list[SequenceRecord]]) -> DatasetManifest:
    """Write sequences under <root>/<split>/<seq_id>/ plus the manifest.

    Depth statistics come from the train split when present, otherwise from
    all splits combined.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stats_splits = ["train"] if "train" in sequences_by_split else sorted(sequences_by_split)
    depth_stack = [
        seq.raw_depth
        for split in stats_splits
        for seq in sequences_by_split[split]
    ]
    if not depth_stack:
        raise DatasetError("cannot write an empty dataset")
    mu, sigma = log_depth_stats(depth_stack)
    first = depth_stack[0]
    manifest = DatasetManifest(
        mu=mu, sigma=sigma, h=first.shape[1], w=first.shape[2], t=first.shape[0]
    )
    for split, sequences in sequences_by_split.items():
        manifest.splits[split] = [seq.seq_id for seq in sequences]
        for seq in sequences:
            seq_dir = root / split / seq.seq_id
            seq_dir.mkdir(parents=True, exist_ok=True)
            for t in range(seq.rgb.shape[0]):
                rgb8 = np.clip(np.round(seq.rgb[t] * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(rgb8, mode="RGB").save(seq_dir / f"frame_{t:04d}.rgb.png")
                mask = seq.labels[t]
                if mask.max() > 255:
                    raise DatasetError(f"{seq.seq_id}: more than 255 instances")
                Image.fromarray(mask.astype(np.uint8), mode="L").save(
                    seq_dir / f"frame_{t:04d}.mask.png"
                )
                _write_depth(seq_dir / f"frame_{t:04d}.depth.f32", seq.raw_depth[t])
    (root / "manifest").write_text(manifest.format())
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest"
    if not path.exists():
        raise DatasetError(f"{path}: missing manifest")
    return DatasetManifest.parse(path.read_text())


def read_sequence(root, split: str, seq_id: str) -> SequenceRecord:
    seq_dir = Path(root) / split / seq_id
    rgb_frames, depth_frames, label_frames = [], [], []
    t = 0
    while True:
        rgb_path = seq_dir / f"frame_{t:04d}.rgb.png"
        if not rgb_path.exists():
            break
        mask_path = seq_dir / f"frame_{t:04d}.mask.png"
        depth_path = seq_dir / f"frame_{t:04d}.depth.f32"
        for p in (mask_path, depth_path):
            if not p.exists():
                raise DatasetError(f"sequence {seq_id} frame {t}: missing {p.name}")
        rgb_frames.append(np.asarray(Image.open(rgb_path), dtype=np.float32) / 255.0)
        label_frames.append(np.asarray(Image.open(mask_path), dtype=np.int64))
        try:
            depth_frames.append(_read_depth(depth_path))
        except DatasetError as err:
            raise DatasetError(f"sequence {seq_id} frame {t}: {err}") from err
        t += 1
    if t == 0:
        raise DatasetError(f"sequence {seq_id}: no frames found in {seq_dir}")
    return SequenceRecord(
        seq_id=seq_id,
        rgb=np.stack(rgb_frames),
        raw_depth=np.stack(depth_frames),
        labels=np.stack(label_frames),
    )


def read_dataset(root, split: str):
    """Yield SequenceRecords for a split, in manifest order."""
    manifest = read_manifest(root)
    if split not in manifest.splits:
        raise DatasetError(f"split {split!r} not in manifest ({sorted(manifest.splits)})")
    for seq_id in manifest.splits[split]:
        yield read_sequence(root, split, seq_id)


def generate_dataset(
    root,
    seed: int,
    h: int = 64,
    w: int = 64,
    num_frames: int = 12,
    counts: dict[str, int] | None = None,
    num_objects: tuple[int, int] = (2, 4),
    pan: bool = False,
) -> DatasetManifest:
    """Generate and write a full synthetic dataset; deterministic in `seed`."""
    counts = counts or {"train": 8, "val": 2}
    rng = np.random.default_rng(seed)
    by_split: dict[str, list[SequenceRecord]] = {}
    for split in sorted(counts):
        records = []
        for i in range(counts[split]):
            spec = random_scene_spec(rng, h, w, num_objects=num_objects, pan=pan)
            frames = render_sequence(spec, num_frames, h, w)
            records.append(
                SequenceRecord(
                    seq_id=f"seq{i:04d}",
                    rgb=np.stack([f[0] for f in frames]),
                    raw_depth=np.stack([f[1] for f in frames]),
                    labels=np.stack([f[2] for f in frames]),
                )
            )
        by_split[split] = records
    return write_dataset(root, by_split)
