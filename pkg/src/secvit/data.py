"""Datasets, checkpoints and run configuration."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PRESETS, ModelConfig

# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_IDX_MAX_ELEMS = 1 << 31


def read_idx(path) -> np.ndarray:
    """Parse an IDX (u8 payload) file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim not in (1, 3):
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated dims header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    n = 1
    for d in dims:
        n *= d
        if n > _IDX_MAX_ELEMS:
            raise ValueError(f"{path}: dims {dims} overflow")
    payload = raw[4 + 4 * ndim :]
    if len(payload) != n:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header declares {n}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ValueError("IDX writer supports labels [n] or images [n, H, W]")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected an image file [n, H, W] and a label file [n]")
    return Dataset((images[:, None] / 255.0).astype(np.float32), labels.astype(np.int64), num_classes)


JITTER = 7.0

SHAPE_CLASSES = (
    "bar0", "bar36", "bar72", "bar108", "bar144",
    "square", "hollow_square", "disc", "cross", "checker",
)


def _draw(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size / 2 + rng.uniform(-JITTER, JITTER, 2)
    r = size * rng.uniform(0.16, 0.30)
    name = SHAPE_CLASSES[cls]
    # small rotation so the non-bar classes are not fixed pixel templates
    theta = np.deg2rad(float(name[3:]) if name.startswith("bar") else 0.0) + rng.uniform(-0.15, 0.15)
    dx = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    dy = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if name.startswith("bar"):
        img = (np.abs(dx) <= r * 1.3) & (np.abs(dy) <= 1.6)
    elif name == "square":
        img = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif name == "hollow_square":
        box = np.maximum(np.abs(dx), np.abs(dy))
        img = (box <= r) & (box >= r - 2.0)
    elif name == "disc":
        img = dx * dx + dy * dy <= r * r
    elif name == "cross":
        img = ((np.abs(dx) <= 1.6) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 1.6) & (np.abs(dx) <= r))
    else:
        cell = max(2, int(round(r / 2)))
        img = (((dx // cell) + (dy // cell)) % 2 == 0) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    return img.astype(np.float64)


def synth_shapes(n: int, seed: int = 0, size: int = 32, noise: float = 0.05) -> Dataset:
    """Procedural 10-class shapes with position/scale jitter and additive noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPE_CLASSES))
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        img = _draw(int(c), rng, size) + rng.normal(0.0, noise, (size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), len(SHAPE_CLASSES))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SECV"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {dt.str: tag for tag, dt in _TAGS.items()}


def save_checkpoint(tensors, path):
    """Write named arrays (a mapping or (name, array) pairs) to ``path``."""
    items = list(tensors.items() if hasattr(tensors, "items") else tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        if not name:
            raise ValueError("tensor names must be non-empty")
        arr = np.asarray(getattr(arr, "data", arr))
        le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        tag = _TAG_OF.get(le.str)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ValueError(f"{path}: not a SECV checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        tag, ndim = struct.unpack("<BI", take(5))
        if tag not in _TAGS:
            raise ValueError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _TAGS[tag]
        count_el = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(count_el * dt.itemsize), dtype=dt).reshape(dims).copy()
        if name in out:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after last entry")
    return out


def plan_arrays(plan) -> dict[str, np.ndarray]:
    """Checkpoint entries for a ClusterPlan (test-vector exchange)."""
    return {
        "sim": np.asarray(plan.sim, dtype=np.float64),
        "idx": np.asarray(plan.idx, dtype=np.uint32),
        "M": np.asarray([plan.num_clusters], dtype=np.uint32),
        "N": np.asarray([plan.cluster_size], dtype=np.uint32),
        "padded": np.asarray([plan.padded], dtype=np.uint32),
    }


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 20
    batch_size: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.05
    n_samples: int = 2000
    seed: int = 0
    dtype: str = "f32"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainOptions = TrainOptions()


class ConfigError(ValueError):
    pass


def _build(cls, raw: dict, path: str, base=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    values = dataclasses.asdict(base) if base is not None else {}
    for name, f in fields.items():
        if name in raw:
            v = raw[name]
            if isinstance(v, list):
                v = tuple(v)
            values[name] = v
        elif name not in values and f.default is dataclasses.MISSING:
            raise ConfigError(f"{path}.{name}: missing required key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(raw) - {"preset", "model", "train"})
    if unknown:
        raise ConfigError(f"config.{unknown[0]}: unknown key")
    base = None
    if "preset" in raw:
        if raw["preset"] not in PRESETS:
            raise ConfigError(f"config.preset: unknown preset {raw['preset']!r}")
        base = PRESETS[raw["preset"]]
    elif "model" not in raw:
        raise ConfigError("config.model: missing required key")
    model = _build(ModelConfig, raw.get("model", {}), "config.model", base)
    train = _build(TrainOptions, raw.get("train", {}), "config.train")
    return RunConfig(model, train)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
