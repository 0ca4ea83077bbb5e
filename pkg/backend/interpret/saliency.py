"""
Saliency maps: vanilla logit gradients and SmoothGrad

A map is the gradient of the predicted class logit with respect to the input,
reduced over channels by the maximum absolute value and divided by its maximum.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from backend.engine.network import Network, forward
from backend.engine.tensor import Graph, backward

from .fourier import LensError

logger = logging.getLogger(__name__)


@dataclass
class SaliencyConfig:
    samples: int = 25
    sigma: float = 0.10
    batch_size: int = 25
    seed: int = 0

    def validate(self):
        if self.samples < 1:
            raise LensError(f"samples must be >= 1, got {self.samples}")
        if self.sigma < 0:
            raise LensError(f"sigma must be >= 0, got {self.sigma}")
        if self.batch_size < 1:
            raise LensError(f"batch_size must be >= 1, got {self.batch_size}")


def input_gradients(net: Network, x: np.ndarray,
                    classes: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of each sample's class logit w.r.t. its input; classes default to the argmax

    Returns:
        (gradients shaped like x, the classes used)
    """
    x = np.asarray(x, dtype=np.float64)
    graph = Graph()
    logits = forward(net, x.copy(), graph=graph, param_grads=False, input_grad=True)
    if classes is None:
        classes = np.argmax(logits.data, axis=1)
    classes = np.asarray(classes, dtype=np.int64)
    seed = np.zeros(logits.shape)
    seed[np.arange(len(x)), classes] = 1.0
    _, grad = backward(graph, seed)
    return (np.zeros_like(x) if grad is None else grad), classes


def reduce_and_normalize(gradients: np.ndarray) -> np.ndarray:
    """(N, C, H, W) gradients -> (N, H, W) maps in [0, 1]; an all-zero map stays zero"""
    maps = np.abs(gradients).max(axis=1)
    peak = maps.max(axis=(1, 2), keepdims=True)
    return np.divide(maps, peak, out=np.zeros_like(maps), where=peak > 0)


def saliency_batch(net: Network, x: np.ndarray) -> np.ndarray:
    _check_input(x, 4)
    gradients, _ = input_gradients(net, x)
    return reduce_and_normalize(gradients)


def saliency(net: Network, x: np.ndarray) -> np.ndarray:
    """(H, W) heatmap for one (C, H, W) image"""
    _check_input(x, 3)
    return saliency_batch(net, np.asarray(x)[None])[0]


def smoothgrad(net: Network, x: np.ndarray, config: SaliencyConfig,
               index: int = 0) -> np.ndarray:
    """Mean gradient over `samples` noisy copies of x, class fixed from the clean prediction

    Noise is N(0, (sigma * (max(x) - min(x)))^2), drawn from a generator seeded by
    (config.seed, index) so a map does not depend on how images are batched.
    """
    config.validate()
    _check_input(x, 3)
    if config.sigma == 0:
        return saliency(net, x)
    x = np.asarray(x, dtype=np.float64)
    _, classes = input_gradients(net, x[None])
    std = config.sigma * float(x.max() - x.min())
    rng = np.random.default_rng([config.seed, index])
    total = np.zeros_like(x)
    remaining = config.samples
    while remaining > 0:
        count = min(remaining, config.batch_size)
        noisy = x[None] + rng.normal(0.0, std, size=(count,) + x.shape)
        gradients, _ = input_gradients(net, noisy, np.repeat(classes, count))
        total += gradients.sum(axis=0)
        remaining -= count
    return reduce_and_normalize((total / config.samples)[None])[0]


def smoothgrad_batch(net: Network, images: np.ndarray, config: SaliencyConfig,
                     offset: int = 0) -> np.ndarray:
    """SmoothGrad maps for (N, C, H, W) images; image i uses noise stream offset + i"""
    _check_input(images, 4)
    return np.stack([smoothgrad(net, image, config, index=offset + i)
                     for i, image in enumerate(images)])


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise LensError(f"Maps differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def heatmap_rgb(heatmap: np.ndarray, colormap: str = "inferno") -> np.ndarray:
    """(H, W) map in [0, 1] -> (H, W, 3) uint8 through a matplotlib colormap"""
    from matplotlib import colormaps

    rgba = colormaps[colormap](np.clip(heatmap, 0.0, 1.0))
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def heatmap_gray(heatmap: np.ndarray) -> np.ndarray:
    """(H, W) map in [0, 1] -> (H, W) uint8 for hashing"""
    return np.round(np.clip(heatmap, 0.0, 1.0) * 255.0).astype(np.uint8)


def _check_input(x, ndim: int):
    if np.asarray(x).ndim != ndim:
        raise LensError(f"Expected a {ndim}-d input, got shape {np.asarray(x).shape}")
