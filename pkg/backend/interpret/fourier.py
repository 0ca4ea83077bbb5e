"""
Fourier-space image parameterisation

An optimised image is stored as the half spectrum of a real signal, one per
channel, with real and imaginary parts in the trailing axis. Decoding scales
each frequency by 1/|f| (the DC term clamped to the lowest frequency), applies
the orthonormal inverse real FFT, mixes channels with a colour matrix and
squashes the result into [0, 1] with a sigmoid.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft as sfft

from backend.engine.tensor import Graph, Tensor, record_op

logger = logging.getLogger(__name__)

MIN_SIDE = 8


class LensError(ValueError):
    """Raised for invalid visualisation or saliency inputs"""


@dataclass
class SpectrumImage:
    """Half-spectrum parameters of shape (channels, height, width // 2 + 1, 2)"""
    params: np.ndarray
    height: int
    width: int
    scale: np.ndarray

    @property
    def channels(self) -> int:
        return self.params.shape[0]

    def complex(self) -> np.ndarray:
        return self.params[..., 0] + 1j * self.params[..., 1]


def frequency_scale(height: int, width: int) -> np.ndarray:
    """1 / max(|f|, 1 / max(h, w)) on the rfft2 frequency grid"""
    fy = sfft.fftfreq(height)[:, None]
    fx = sfft.rfftfreq(width)[None, :]
    magnitude = np.sqrt(fy * fy + fx * fx)
    return 1.0 / np.maximum(magnitude, 1.0 / max(height, width))


def fourier_param_init(height: int, width: int, channels: int = 3, seed: int = 0,
                       std: float = 0.01) -> SpectrumImage:
    if height < MIN_SIDE or width < MIN_SIDE:
        raise LensError(f"Spectrum images need sides >= {MIN_SIDE}, got {height}x{width}")
    if channels < 1:
        raise LensError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    params = rng.normal(0.0, std, size=(channels, height, width // 2 + 1, 2))
    return SpectrumImage(params=params, height=height, width=width,
                         scale=frequency_scale(height, width))


def validate_color_matrix(matrix, channels: Optional[int] = None) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise LensError(f"Colour matrix must be square, got shape {matrix.shape}")
    if channels is not None and matrix.shape[0] != channels:
        raise LensError(f"Colour matrix is {matrix.shape[0]}x{matrix.shape[0]}, "
                        f"images have {channels} channels")
    if not np.all(np.isfinite(matrix)):
        raise LensError("Colour matrix contains non-finite values")
    if np.linalg.cond(matrix) > 1e12:
        raise LensError("Colour matrix is not invertible")
    return matrix


def dataset_color_matrix(images: np.ndarray) -> np.ndarray:
    """Cholesky factor of the channel covariance of all pixels in (N, C, H, W) images"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise LensError(f"Expected (N, C, H, W) images, got {images.shape}")
    pixels = images.transpose(1, 0, 2, 3).reshape(images.shape[1], -1)
    covariance = np.atleast_2d(np.cov(pixels))
    try:
        factor = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as e:
        raise LensError(f"Dataset pixel covariance is not positive definite: {e}") from e
    return validate_color_matrix(factor)


def _logit(image: np.ndarray) -> np.ndarray:
    image = np.clip(image, 1e-12, 1.0 - 1e-12)
    return np.log(image) - np.log1p(-image)


def decode(spectrum: SpectrumImage, color_matrix=None, squash: bool = True) -> np.ndarray:
    """(C, H, W) image; in [0, 1] when squashed"""
    matrix = np.eye(spectrum.channels) if color_matrix is None else \
        validate_color_matrix(color_matrix, spectrum.channels)
    spatial = sfft.irfft2(spectrum.complex() * spectrum.scale,
                          s=(spectrum.height, spectrum.width), norm="ortho")
    mixed = np.einsum("ij,jhw->ihw", matrix, spatial)
    return 0.5 * (1.0 + np.tanh(0.5 * mixed)) if squash else mixed


def encode(image: np.ndarray, color_matrix=None, squashed: bool = True) -> SpectrumImage:
    """Inverse of decode for a (C, H, W) image"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise LensError(f"Expected a (C, H, W) image, got {image.shape}")
    channels, height, width = image.shape
    matrix = np.eye(channels) if color_matrix is None else \
        validate_color_matrix(color_matrix, channels)
    mixed = _logit(image) if squashed else image
    spatial = np.linalg.solve(matrix, mixed.reshape(channels, -1)).reshape(image.shape)
    scale = frequency_scale(height, width)
    coefficients = sfft.rfft2(spatial, norm="ortho") / scale
    params = np.stack([coefficients.real, coefficients.imag], axis=-1)
    return SpectrumImage(params=params, height=height, width=width, scale=scale)


# Recorded ops used by the visualisation loop


def spectral_decode(params: Tensor, scale: np.ndarray, height: int, width: int,
                    graph: Optional[Graph] = None) -> Tensor:
    """(C, H, W//2+1, 2) parameters -> (1, C, H, W) spatial image"""
    coefficients = (params.data[..., 0] + 1j * params.data[..., 1]) * scale
    out = sfft.irfft2(coefficients, s=(height, width), norm="ortho")[None]
    # the inverse real FFT counts every interior column twice (it and its mirror)
    weight = np.full(params.shape[2], 2.0)
    weight[0] = 1.0
    if width % 2 == 0:
        weight[-1] = 1.0

    def _backward(g, needs):
        spectrum = sfft.rfft2(g[0], norm="ortho") * weight * scale
        return (np.stack([spectrum.real, spectrum.imag], axis=-1),)

    return record_op(graph, "spectral_decode", (params,), out, _backward)


def channel_mix(x: Tensor, matrix: np.ndarray, graph: Optional[Graph] = None) -> Tensor:
    """y[:, i] = sum_j matrix[i, j] x[:, j] for a fixed matrix"""
    out = np.einsum("ij,njhw->nihw", matrix, x.data)

    def _backward(g, needs):
        return (np.einsum("ij,nihw->njhw", matrix, g),)

    return record_op(graph, "channel_mix", (x,), out, _backward)
