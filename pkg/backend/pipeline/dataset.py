"""
Datasets for the desk-scale experiments

The synthetic set has ten classes, one per (shape, colour) combination, drawn
procedurally at 32x32x3 from a seeded generator. External grayscale data can be
read from IDX files (the MNIST container format), optionally gzip-compressed.
"""

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")
COLORS = {"warm": (0.90, 0.30, 0.10), "cool": (0.15, 0.35, 0.90)}

IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DatasetError(ValueError):
    """Raised for malformed dataset files or parameters"""


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    image_size: int = 32
    train_per_class: int = 200
    val_per_class: int = 50
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    val_images: Optional[str] = None
    val_labels: Optional[str] = None
    val_fraction: float = 0.2

    def validate(self):
        if self.kind not in ("synthetic", "idx"):
            raise DatasetError(f"kind must be 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "synthetic":
            if self.image_size < 8:
                raise DatasetError(f"image_size must be >= 8, got {self.image_size}")
            if self.train_per_class < 1 or self.val_per_class < 1:
                raise DatasetError("train_per_class and val_per_class must be >= 1")
        else:
            for name in ("train_images", "train_labels"):
                if not getattr(self, name):
                    raise DatasetError(f"{name} is required for IDX datasets")
            if bool(self.val_images) != bool(self.val_labels):
                raise DatasetError("val_images and val_labels must be given together")
            if not 0.0 < self.val_fraction < 1.0:
                raise DatasetError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    @property
    def num_classes(self) -> Optional[int]:
        """Known up front for synthetic data only; IDX files define it through their labels"""
        return len(class_names()) if self.kind == "synthetic" else None


@dataclass
class Dataset:
    """Images are (N, C, H, W) float64 in [0, 1]; labels are int64"""
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    class_names: List[str] = field(default_factory=list)
    source: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        for name in ("x_train", "x_val"):
            images = getattr(self, name)
            if images.ndim != 4:
                raise DatasetError(f"{name} must be (N, C, H, W), got {images.shape}")
        if len(self.x_train) != len(self.y_train) or len(self.x_val) != len(self.y_val):
            raise DatasetError("Image and label counts differ")
        if not self.class_names:
            count = int(max(self.y_train.max(), self.y_val.max())) + 1
            self.class_names = [str(c) for c in range(count)]

    @property
    def channels(self) -> int:
        return self.x_train.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.x_train.shape[2], self.x_train.shape[3]

    def class_counts(self, split: str = "train") -> np.ndarray:
        labels = self.y_train if split == "train" else self.y_val
        return np.bincount(labels, minlength=self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        for array in (self.x_train, self.y_train, self.x_val, self.y_val):
            h.update(np.ascontiguousarray(array).tobytes())
        return h.hexdigest()


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
                radius: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * radius
    if shape == "triangle":
        return (dy <= 0.8 * radius) & (dy >= 2.0 * np.abs(dx) - radius)
    if shape == "cross":
        arm = radius / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | \
            ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    if shape == "ring":
        distance = np.sqrt(dy * dy + dx * dx)
        return (distance <= radius) & (distance >= 0.55 * radius)
    raise DatasetError(f"Unknown shape {shape!r}")


def draw_sample(shape: str, color: Tuple[float, float, float], size: int,
                rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) image of a coloured shape on a dark textured background"""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    radius = rng.uniform(0.25, 0.38) * size
    margin = radius * 0.6
    cy = rng.uniform(size / 2 - margin, size / 2 + margin)
    cx = rng.uniform(size / 2 - margin, size / 2 + margin)
    background = rng.uniform(0.05, 0.35, size=3)[:, None, None]
    image = background + rng.normal(0.0, 0.03, size=(3, size, size))
    tint = np.clip(np.asarray(color) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    mask = _shape_mask(shape, yy, xx, cy, cx, radius)
    image[:, mask] = tint[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    return np.clip(image, 0.0, 1.0)


def class_names() -> List[str]:
    return [f"{color}_{shape}" for shape in SHAPES for color in COLORS]


def _synthetic_split(per_class: int, size: int, rng: np.random.Generator
                     ) -> Tuple[np.ndarray, np.ndarray]:
    combos = [(shape, COLORS[color]) for shape in SHAPES for color in COLORS]
    labels = np.repeat(np.arange(len(combos)), per_class)
    rng.shuffle(labels)
    images = np.stack([draw_sample(*combos[label], size, rng) for label in labels])
    return images, labels.astype(np.int64)


def gen_dataset(config: DatasetConfig) -> Dataset:
    """Build the configured dataset deterministically from its seed"""
    config.validate()
    if config.kind == "idx":
        return load_idx_dataset(config)
    rng = np.random.default_rng(config.seed)
    x_train, y_train = _synthetic_split(config.train_per_class, config.image_size, rng)
    x_val, y_val = _synthetic_split(config.val_per_class, config.image_size, rng)
    logger.info(f"Generated synthetic dataset: {len(x_train)} train / {len(x_val)} val images "
                f"of {config.image_size}x{config.image_size} (seed={config.seed})")
    return Dataset(x_train, y_train, x_val, y_val, class_names=class_names(),
                   source="synthetic", seed=config.seed)


def read_idx(path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, a type code, a dimension count, big-endian uint32 dims"""
    path = Path(path)
    try:
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DatasetError(f"Cannot read IDX file {path}: {e}") from e
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DatasetError(f"{path}: bad IDX magic")
    type_code, ndim = data[2], data[3]
    if type_code not in IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX type code 0x{type_code:02x}")
    if ndim < 1 or len(data) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    dtype = np.dtype(IDX_DTYPES[type_code])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = data[4 + 4 * ndim:]
    if len(body) != expected:
        raise DatasetError(f"{path}: header announces {expected} data bytes, file has {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def _idx_pair(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected (N, H, W) images, got {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetError(f"{labels_path}: expected {len(images)} labels, got {labels.shape}")
    scale = 255.0 if images.dtype.kind in "ui" else 1.0
    return (images.astype(np.float64) / scale)[:, None], labels.astype(np.int64)


def load_idx_dataset(config: DatasetConfig) -> Dataset:
    x_train, y_train = _idx_pair(config.train_images, config.train_labels)
    if config.val_images:
        x_val, y_val = _idx_pair(config.val_images, config.val_labels)
    else:
        order = np.random.default_rng(config.seed).permutation(len(x_train))
        cut = int(round(len(order) * (1.0 - config.val_fraction)))
        x_train, x_val = x_train[order[:cut]], x_train[order[cut:]]
        y_train, y_val = y_train[order[:cut]], y_train[order[cut:]]
    if len(x_val) == 0 or len(x_train) == 0:
        raise DatasetError("IDX dataset split left an empty train or validation set")
    logger.info(f"Loaded IDX dataset {config.train_images}: {len(x_train)} train / "
                f"{len(x_val)} val images")
    return Dataset(x_train, y_train, x_val, y_val, source="idx", seed=config.seed)


def write_idx(array: np.ndarray, path) -> Path:
    """Write a uint8 array as IDX (type 0x08)"""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError(f"write_idx supports uint8 arrays, got {array.dtype}")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    path.write_bytes(header + array.tobytes())
    return path
