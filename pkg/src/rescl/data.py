"""Synthetic image tasks and the "RCLD" dataset file format.

All randomness comes from numpy's Philox-4x64 counter-based generator keyed
by the task seed, and labels are assigned with integer operations only, so a
task spec regenerates the same bytes everywhere.

RCLD layout (little-endian)::

    b"RCLD" | version:u32 | N, C, H, W, K: u64 | labels: u16[N] | images: f32[N*C*H*W]
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"RCLD"
VERSION = 1
FAMILIES = ("bars", "glyphs", "blobs")

# seven-segment strokes on an 8x8 canvas as (r0, c0, r1, c1)
_SEGMENTS = {
    "top": (1.0, 2.0, 1.0, 5.0),
    "ul": (1.0, 2.0, 3.5, 2.0),
    "ur": (1.0, 5.0, 3.5, 5.0),
    "mid": (3.5, 2.0, 3.5, 5.0),
    "ll": (3.5, 2.0, 6.0, 2.0),
    "lr": (3.5, 5.0, 6.0, 5.0),
    "bot": (6.0, 2.0, 6.0, 5.0),
}
_DIGITS = [
    ("top", "ul", "ur", "ll", "lr", "bot"),
    ("ur", "lr"),
    ("top", "ur", "mid", "ll", "bot"),
    ("top", "ur", "mid", "lr", "bot"),
    ("ul", "ur", "mid", "lr"),
    ("top", "ul", "mid", "lr", "bot"),
    ("top", "ul", "mid", "ll", "lr", "bot"),
    ("top", "ur", "lr"),
    ("top", "ul", "ur", "mid", "ll", "lr", "bot"),
    ("top", "ul", "ur", "mid", "lr", "bot"),
]


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str = "bars"
    n_classes: int = 4
    size: int = 8
    channels: int = 3
    noise: float = 0.05
    n_train: int = 1024
    n_val: int = 256
    n_test: int = 512
    seed: int = 0
    jitter: float = 1.0  # max random shift in pixels
    angle_offset: float = 0.0  # degrees, bars only
    background: float = 0.1
    contrast: float = 0.8  # signed; negative draws dark strokes
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.n_classes < 2 or (self.family == "glyphs" and self.n_classes > len(_DIGITS)):
            raise ValueError("invalid class count")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("sample counts must be positive")
        if self.size < 4 or self.channels < 1 or self.noise < 0 or self.jitter < 0:
            raise ValueError("invalid image parameters")
        if len(self.color) != self.channels:
            raise ValueError("color must give one gain per channel")

    def to_manifest(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int
    split: str = "train"
    index: np.ndarray | None = None  # global sample ids within the task

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty dataset")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Philox generator; ``stream`` selects an independent sequence for the same seed."""
    if stream is None:
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _segment_distance(rr, cc, r0, c0, r1, c1):
    dr, dc = r1 - r0, c1 - c0
    L2 = dr * dr + dc * dc
    t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / L2, 0.0, 1.0)
    return np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))


def _render(spec: TaskSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = rng.uniform(-spec.jitter, spec.jitter, size=2) if spec.jitter else (0.0, 0.0)
    width = rng.uniform(0.6, 1.0)
    scale = s / 8.0
    if spec.family == "bars":
        theta = np.deg2rad(spec.angle_offset) + label * np.pi / spec.n_classes
        cy, cx = (s - 1) / 2 + dy, (s - 1) / 2 + dx
        d = np.abs(-(rr - cy) * np.cos(theta) + (cc - cx) * np.sin(theta))
        profile = np.exp(-d ** 2 / (2 * (width * scale) ** 2))
    elif spec.family == "glyphs":
        d = np.full((s, s), np.inf)
        for seg in _DIGITS[label]:
            r0, c0, r1, c1 = (v * scale for v in _SEGMENTS[seg])
            d = np.minimum(d, _segment_distance(rr, cc, r0 + dy, c0 + dx, r1 + dy, c1 + dx))
        profile = np.exp(-d ** 2 / (2 * (0.7 * width * scale) ** 2))
    else:
        ang = 2 * np.pi * label / spec.n_classes
        cy = (s - 1) / 2 + 0.25 * s * np.sin(ang) + dy
        cx = (s - 1) / 2 + 0.25 * s * np.cos(ang) + dx
        blob = np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * (1.2 * scale) ** 2))
        phase = rng.uniform(0, 2 * np.pi)
        texture = 0.5 + 0.5 * np.cos((rr + cc) * np.pi / 2 + phase)
        profile = blob * (0.5 + 0.5 * texture)
    gain = np.asarray(spec.color, np.float64)[:, None, None]
    img = spec.background + spec.contrast * gain * profile[None]
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_task(spec: TaskSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, val, test) splits for ``spec``."""
    spec.validate()
    rng = make_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    labels = rng.permutation(np.arange(n, dtype=np.int64) % spec.n_classes)
    images = np.empty((n, spec.channels, spec.size, spec.size), dtype=np.float32)
    for i in range(n):
        images[i] = _render(spec, int(labels[i]), rng)
    idx = np.arange(n)
    cuts = [0, spec.n_train, spec.n_train + spec.n_val, n]
    out = []
    for split, a, b in zip(("train", "val", "test"), cuts[:-1], cuts[1:]):
        out.append(Dataset(images[a:b].copy(), labels[a:b].copy(), spec.n_classes, split, idx[a:b]))
    return tuple(out)


def default_suite(seed: int = 0) -> dict[str, TaskSpec]:
    """Task A (oriented bars), B (bars at other angles; similar) and C (digit glyphs; dissimilar).

    All three share intensity statistics, so dissimilarity lives in the
    pattern family rather than in brightness or color.
    """
    return {
        "A": TaskSpec("A", "bars", 4, seed=1000 + seed),
        "B": TaskSpec("B", "bars", 4, seed=2000 + seed, angle_offset=22.5, background=0.15,
                      contrast=0.75),
        "C": TaskSpec("C", "glyphs", 4, seed=3000 + seed),
    }


SCENARIOS = {
    "A-to-B": ("A", "B"),
    "A-to-C": ("A", "C"),
    "A-to-B-to-C": ("A", "B", "C"),
}


def scenario_tasks(name: str) -> tuple[str, ...]:
    if name in SCENARIOS:
        return SCENARIOS[name]
    parts = tuple(name.split("-to-"))
    if len(parts) < 2:
        raise ValueError(f"unknown scenario {name!r}")
    return parts


# -- augmentation -------------------------------------------------------------------------

def hflip(images: np.ndarray, coins: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[coins] = out[coins][..., ::-1]
    return out


def augment(batch: np.ndarray, flip: bool, pad_crop: int, rng: np.random.Generator,
            crop_size: int | None = None) -> np.ndarray:
    """Random horizontal flip (p = 1/2) and random crop from a zero-padded copy."""
    if pad_crop < 0:
        raise ValueError("pad_crop must be non-negative")
    n, c, h, w = batch.shape
    crop = h if crop_size is None else crop_size
    if crop > h + 2 * pad_crop or crop > w + 2 * pad_crop:
        raise ValueError("crop is larger than the padded image")
    out = batch
    if flip:
        out = hflip(out, rng.random(n) < 0.5)
    if pad_crop or crop != h:
        padded = np.pad(out, ((0, 0), (0, 0), (pad_crop, pad_crop), (pad_crop, pad_crop)))
        top = rng.integers(0, h + 2 * pad_crop - crop + 1, size=n)
        left = rng.integers(0, w + 2 * pad_crop - crop + 1, size=n)
        out = np.stack([padded[i, :, t:t + crop, l:l + crop] for i, (t, l) in enumerate(zip(top, left))])
    return out


# -- files --------------------------------------------------------------------------------

def encode_dataset(ds: Dataset) -> bytes:
    if len(ds) == 0:
        raise DatasetFormatError("refusing to store an empty dataset")
    n, c, h, w = ds.images.shape
    head = MAGIC + struct.pack("<I5Q", VERSION, n, c, h, w, ds.n_classes)
    return (head + ds.labels.astype("<u2").tobytes()
            + np.ascontiguousarray(ds.images, dtype="<f4").tobytes())


def decode_dataset(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic; not an RCLD file")
    if len(buf) < 48:
        raise DatasetFormatError("truncated header")
    version, n, c, h, w, k = struct.unpack("<I5Q", buf[4:48])
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if n == 0:
        raise DatasetFormatError("empty dataset")
    need = 48 + 2 * n + 4 * n * c * h * w
    if len(buf) != need:
        raise DatasetFormatError(f"expected {need} bytes, found {len(buf)}")
    labels = np.frombuffer(buf, "<u2", n, 48).astype(np.int64)
    images = np.frombuffer(buf, "<f4", n * c * h * w, 48 + 2 * n).reshape(n, c, h, w).astype(np.float32)
    return Dataset(images, labels, int(k), split, np.arange(n))


def store_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    if split is None:
        split = path.stem.rsplit(".", 1)[-1] if "." in path.stem else "train"
    return decode_dataset(path.read_bytes(), split)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_task(directory, spec: TaskSpec) -> dict[str, Path]:
    """Write ``<name>.{train,val,test}.rcld`` plus a key=value manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    lines = [spec.to_manifest()]
    for ds in gen_task(spec):
        p = directory / f"{spec.name}.{ds.split}.rcld"
        store_dataset(p, ds)
        paths[ds.split] = p
        lines.append(f"sha256.{ds.split}={sha256_file(p)}\n")
    (directory / f"{spec.name}.manifest").write_text("".join(lines))
    return paths


def read_task(directory, name: str) -> tuple[Dataset, Dataset, Dataset]:
    directory = Path(directory)
    return tuple(load_dataset(directory / f"{name}.{s}.rcld", s) for s in ("train", "val", "test"))


def parse_manifest(text: str) -> TaskSpec:
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("sha256."))
    kw = {}
    for f in fields(TaskSpec):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        default = getattr(TaskSpec("x"), f.name)
        if isinstance(default, tuple):
            kw[f.name] = tuple(float(v) for v in raw.split(","))
        elif isinstance(default, bool):
            kw[f.name] = raw == "True"
        else:
            kw[f.name] = type(default)(raw)
    return TaskSpec(**kw)


def spec_hash(spec: TaskSpec) -> str:
    return hashlib.sha256(spec.to_manifest().encode()).hexdigest()[:16]


__all__ = [
    "Dataset", "TaskSpec", "gen_task", "default_suite", "augment", "hflip", "store_dataset",
    "load_dataset", "write_task", "read_task", "SCENARIOS", "scenario_tasks", "make_rng",
    "DatasetFormatError", "parse_manifest", "spec_hash",
]
