"""
64-bit perceptual hashes and Hamming distance

Bits are laid out row-major, most significant bit first, and serialised as
16 lowercase hex characters.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Union

import numpy as np

from .image_ops import (HashError, RasterImage, as_raster, dct2, grayscale, haar_dwt2,
                        load_raster, resize, rgb_to_hsv)

logger = logging.getLogger(__name__)

HASH_BITS = 64
ALGORITHMS = ("ahash", "phash", "dhash", "whash", "colorhash")
GRAYSCALE_ALGORITHMS = ("ahash", "phash", "dhash", "whash")


@dataclass(frozen=True)
class PerceptualHash:
    value: int
    algorithm: str

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise HashError(f"Unknown hash algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0 <= self.value < 1 << HASH_BITS:
            raise HashError(f"Hash value does not fit in {HASH_BITS} bits")

    @property
    def hex(self) -> str:
        return f"{self.value:016x}"

    @property
    def bits(self) -> np.ndarray:
        return np.array([(self.value >> (HASH_BITS - 1 - i)) & 1 for i in range(HASH_BITS)],
                        dtype=np.uint8)

    @classmethod
    def from_bits(cls, bits, algorithm: str) -> "PerceptualHash":
        bits = np.asarray(bits).ravel()
        if bits.size != HASH_BITS:
            raise HashError(f"Expected {HASH_BITS} bits, got {bits.size}")
        value = 0
        for bit in bits:
            value = (value << 1) | int(bool(bit))
        return cls(value, algorithm)

    @classmethod
    def from_hex(cls, text: str, algorithm: str = "ahash") -> "PerceptualHash":
        text = text.strip().lower()
        if len(text) != HASH_BITS // 4:
            raise HashError(f"Expected {HASH_BITS // 4} hex characters, got {text!r}")
        try:
            return cls(int(text, 16), algorithm)
        except ValueError as e:
            raise HashError(f"Not a hex string: {text!r}") from e

    def __sub__(self, other: "PerceptualHash") -> int:
        return hamming(self, other)

    def __str__(self) -> str:
        return self.hex


def _above(values: np.ndarray, threshold) -> np.ndarray:
    """values > threshold, ignoring differences at floating-point residue level"""
    tolerance = 1e-9 * max(1.0, float(np.max(np.abs(values))))
    return values > threshold + tolerance


def _gray_cells(image, width: int, height: int) -> np.ndarray:
    return resize(grayscale(as_raster(image)), width, height).pixels[..., 0]


def ahash(image) -> PerceptualHash:
    cells = _gray_cells(image, 8, 8)
    return PerceptualHash.from_bits(_above(cells, cells.mean()), "ahash")


def phash(image) -> PerceptualHash:
    coefficients = dct2(_gray_cells(image, 32, 32))[:8, :8]
    return PerceptualHash.from_bits(_above(coefficients, np.median(coefficients)), "phash")


def dhash(image) -> PerceptualHash:
    cells = _gray_cells(image, 9, 8)
    left, right = cells[:, :-1], cells[:, 1:]
    tolerance = 1e-9 * max(1.0, float(np.max(np.abs(cells))))
    return PerceptualHash.from_bits(right > left + tolerance, "dhash")


def whash(image) -> PerceptualHash:
    approximation = haar_dwt2(_gray_cells(image, 64, 64), levels=3)[0]
    return PerceptualHash.from_bits(_above(approximation, np.median(approximation)), "whash")


def colorhash(image) -> PerceptualHash:
    """Eight 8-bit population fractions: black, gray, then six hue bins"""
    image = as_raster(image)
    if image.channels != 3:
        raise HashError("colorhash needs an RGB image; use ahash for grayscale input")
    hsv = rgb_to_hsv(image).pixels
    hue, saturation, value = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    black = value < 0.25
    gray = ~black & (saturation < 0.10)
    colored = ~black & ~gray
    # the offset keeps exact sextant boundaries such as pure green (h = 1/3) in their own bin
    bins = np.floor(hue * 6 + 1e-9).astype(np.int64) % 6
    counts = [int(black.sum()), int(gray.sum())]
    counts += [int(np.sum(colored & (bins == b))) for b in range(6)]
    total = image.width * image.height
    result = 0
    for count in counts:
        result = (result << 8) | (count * 255 // total)
    return PerceptualHash(result, "colorhash")


HASHERS: Dict[str, Callable[[Union[RasterImage, np.ndarray]], PerceptualHash]] = {
    "ahash": ahash,
    "phash": phash,
    "dhash": dhash,
    "whash": whash,
    "colorhash": colorhash,
}


def hash_image(image, algorithm: str) -> PerceptualHash:
    if algorithm not in HASHERS:
        raise HashError(f"Unknown hash algorithm {algorithm!r}; choose from {ALGORITHMS}")
    return HASHERS[algorithm](image)


def hash_file(path: Union[str, Path], algorithm: str) -> PerceptualHash:
    return hash_image(load_raster(path), algorithm)


def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    if a.algorithm != b.algorithm:
        raise HashError(f"Cannot compare a {a.algorithm} hash with a {b.algorithm} hash")
    return bin(a.value ^ b.value).count("1")
