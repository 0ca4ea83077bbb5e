"""
Random affine augmentations for transformation-robust visualisation

jitter -> scale -> rotate -> jitter is composed into a single affine map and
applied by resampling the image at the inverse-mapped coordinates with
reflect padding. The resampling is a recorded op so the objective gradient
flows back to the decoded image exactly.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from backend.engine.tensor import Graph, ShapeError, Tensor, record_op

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Augmentation:
    """One sampled transform: shifts in pixels, scale factor, rotation in degrees"""
    shift1: Tuple[int, int] = (0, 0)
    scale: float = 1.0
    angle: float = 0.0
    shift2: Tuple[int, int] = (0, 0)

    def is_identity(self) -> bool:
        return self.shift1 == (0, 0) and self.shift2 == (0, 0) and self.scale == 1.0 \
            and self.angle == 0.0


def sample_augmentation(rng: np.random.Generator, jitter1: int = 8,
                        scale_range: Tuple[float, float] = (0.95, 1.05),
                        rotate: float = 5.0, jitter2: int = 4) -> Augmentation:
    return Augmentation(
        shift1=(int(rng.integers(-jitter1, jitter1 + 1)), int(rng.integers(-jitter1, jitter1 + 1))),
        scale=float(rng.uniform(scale_range[0], scale_range[1])),
        angle=float(rng.uniform(-rotate, rotate)),
        shift2=(int(rng.integers(-jitter2, jitter2 + 1)), int(rng.integers(-jitter2, jitter2 + 1))),
    )


def source_coordinates(aug: Augmentation, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Input (y, x) coordinates sampled by every output pixel"""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    # undo the second shift, then rotation and scale about the centre, then the first shift
    y = yy - aug.shift2[0] - cy
    x = xx - aug.shift2[1] - cx
    theta = math.radians(aug.angle)
    cos, sin = math.cos(theta), math.sin(theta)
    ry = (cos * y - sin * x) / aug.scale
    rx = (sin * y + cos * x) / aug.scale
    return ry + cy - aug.shift1[0], rx + cx - aug.shift1[1]


def reflect_coordinates(coords: np.ndarray, size: int) -> np.ndarray:
    """Fold coordinates into [0, size - 1] by mirroring about the edge pixels"""
    if size == 1:
        return np.zeros_like(coords)
    period = 2.0 * (size - 1)
    folded = np.mod(np.abs(coords), period)
    return np.where(folded > size - 1, period - folded, folded)


def resample(x: Tensor, sy: np.ndarray, sx: np.ndarray, graph: Optional[Graph] = None,
             mode: str = "bilinear") -> Tensor:
    """Sample (N, C, H, W) `x` at coordinates (sy, sx) of shape (H', W')"""
    if x.data.ndim != 4:
        raise ShapeError(f"resample expects (N, C, H, W), got {x.shape}")
    if sy.shape != sx.shape:
        raise ShapeError(f"resample: coordinate grids differ {sy.shape} vs {sx.shape}")
    height, width = x.shape[2], x.shape[3]
    sy = reflect_coordinates(sy, height)
    sx = reflect_coordinates(sx, width)
    index = (slice(None), slice(None))

    if mode == "nearest":
        iy = np.clip(np.rint(sy).astype(np.int64), 0, height - 1)
        ix = np.clip(np.rint(sx).astype(np.int64), 0, width - 1)
        out = x.data[:, :, iy, ix]

        def _nearest_backward(g, needs):
            grad = np.zeros_like(x.data)
            np.add.at(grad, index + (iy, ix), g)
            return (grad,)

        return record_op(graph, "resample_nearest", (x,), out, _nearest_backward)

    if mode != "bilinear":
        raise ValueError(f"Unknown resampling mode {mode!r}")
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = sy - y0
    wx = sx - x0
    corners = [
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    ]
    out = sum(x.data[:, :, iy, ix] * w for iy, ix, w in corners)

    def _backward(g, needs):
        grad = np.zeros_like(x.data)
        for iy, ix, w in corners:
            np.add.at(grad, index + (iy, ix), g * w)
        return (grad,)

    return record_op(graph, "resample_bilinear", (x,), out, _backward)


def augment(x: Tensor, aug: Augmentation, graph: Optional[Graph] = None,
            mode: str = "bilinear") -> Tensor:
    if aug.is_identity():
        return x
    sy, sx = source_coordinates(aug, x.shape[2], x.shape[3])
    return resample(x, sy, sx, graph=graph, mode=mode)
