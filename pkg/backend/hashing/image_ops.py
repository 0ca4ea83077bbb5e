"""
Image operations for the perceptual hashes

Rasters are float64 arrays of shape (height, width, channels) in row-major
order. Resizing is an exact area average so hashes do not depend on an image
library's resampling filter.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
import pywt
from matplotlib.colors import rgb_to_hsv as _mpl_rgb_to_hsv
from PIL import Image
from scipy import fft as sfft

logger = logging.getLogger(__name__)


class HashError(ValueError):
    """Raised for invalid images or hash comparisons"""


@dataclass
class RasterImage:
    """Pixels in [0, max_value]; 255 for 8-bit data, 1 for real-valued data"""
    pixels: np.ndarray
    max_value: float = 255.0

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise HashError(f"Raster must be (H, W), (H, W, 1) or (H, W, 3), got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise HashError(f"Raster dimensions must be >= 1, got {pixels.shape[:2]}")
        if not np.all(np.isfinite(pixels)):
            raise HashError("Raster contains non-finite values")
        if pixels.min() < 0 or pixels.max() > self.max_value:
            raise HashError(f"Raster values must lie in [0, {self.max_value}]")
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_chw(cls, image: np.ndarray) -> "RasterImage":
        """Wrap a (C, H, W) image with values in [0, 1]"""
        return cls(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0),
                   max_value=1.0)

    def to_uint8(self) -> np.ndarray:
        scaled = np.round(self.pixels * (255.0 / self.max_value))
        data = np.clip(scaled, 0, 255).astype(np.uint8)
        return data[:, :, 0] if self.channels == 1 else data


def as_raster(image) -> RasterImage:
    if isinstance(image, RasterImage):
        return image
    return RasterImage(np.asarray(image))


def grayscale(image: RasterImage) -> RasterImage:
    if image.channels == 1:
        return image
    r, g, b = image.pixels[..., 0], image.pixels[..., 1], image.pixels[..., 2]
    gray = 0.299 * r + 0.587 * g + 0.114 * b
    return RasterImage(np.minimum(gray, image.max_value), image.max_value)


def _box_weights(source: int, target: int) -> np.ndarray:
    """(target, source) matrix averaging the source cells each target cell covers"""
    edges = np.arange(target + 1) * (source / target)
    lower = np.maximum(edges[:-1, None], np.arange(source)[None, :])
    upper = np.minimum(edges[1:, None], np.arange(1, source + 1)[None, :])
    overlap = np.clip(upper - lower, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize(image: RasterImage, width: int, height: int) -> RasterImage:
    if width < 1 or height < 1:
        raise HashError(f"Target size must be at least 1x1, got {width}x{height}")
    wy = _box_weights(image.height, height)
    wx = _box_weights(image.width, width)
    out = np.einsum("ij,jkc,lk->ilc", wy, image.pixels, wx)
    return RasterImage(np.clip(out, 0.0, image.max_value), image.max_value)


def rgb_to_hsv(image: RasterImage) -> RasterImage:
    """Hexcone HSV with every component in [0, 1]"""
    if image.channels != 3:
        raise HashError(f"rgb_to_hsv needs 3 channels, got {image.channels}")
    return RasterImage(_mpl_rgb_to_hsv(image.pixels / image.max_value), max_value=1.0)


def dct2(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DCT-II"""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or min(block.shape) < 2:
        raise HashError(f"dct2 needs a 2D block with sides >= 2, got {block.shape}")
    return sfft.dctn(block, type=2, norm="ortho")


def idct2(coefficients: np.ndarray) -> np.ndarray:
    return sfft.idctn(np.asarray(coefficients, dtype=np.float64), type=2, norm="ortho")


def haar_dwt2(image: np.ndarray, levels: int) -> List:
    """[approximation, (horizontal, vertical, diagonal) details coarsest first, ...]"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise HashError(f"haar_dwt2 needs a 2D array, got {image.shape}")
    if levels < 1:
        raise HashError(f"levels must be >= 1, got {levels}")
    factor = 2 ** levels
    if image.shape[0] % factor or image.shape[1] % factor:
        raise HashError(f"Image {image.shape} is not divisible by 2^{levels}")
    return pywt.wavedec2(image, "haar", level=levels)


def load_raster(path: Union[str, Path]) -> RasterImage:
    """Read an image file as 8-bit grayscale or RGB; alpha and palettes are flattened"""
    try:
        with Image.open(path) as img:
            mode = "L" if img.mode in ("1", "L", "LA", "I", "I;16", "F") else "RGB"
            data = np.asarray(img.convert(mode), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise HashError(f"Cannot read image {path}: {e}") from e
    return RasterImage(data, max_value=255.0)


def save_png(image, path: Union[str, Path]) -> Path:
    """Write a RasterImage or a uint8 (H, W) / (H, W, 3) array as PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(image, RasterImage):
        data = image.to_uint8()
    else:
        data = np.asarray(image)
        if data.dtype != np.uint8:
            raise HashError(f"Arrays saved as PNG must be uint8, got {data.dtype}")
    Image.fromarray(data).save(path, format="PNG")
    logger.debug(f"Wrote {path}")
    return path
