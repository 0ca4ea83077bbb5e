"""
Feature visualisation by activation maximisation

Optimises a Fourier-parameterised image with Adam so that one channel of one
layer responds as strongly (or as weakly) as possible, under random jitter,
scale and rotation at every step.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from backend.engine.network import Network, forward
from backend.engine.optim import Adam
from backend.engine.tensor import Graph, Tensor, channel_mean, scale, sigmoid
from backend.thread_pool_manager import run_jobs

from .fourier import (LensError, SpectrumImage, channel_mix, decode, fourier_param_init,
                      spectral_decode, validate_color_matrix)
from .transforms import augment, sample_augmentation

logger = logging.getLogger(__name__)

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


@dataclass(frozen=True)
class VizObjective:
    layer: int
    channel: int
    sign: str = MAXIMIZE

    def validate(self, net: Network):
        if self.sign not in (MAXIMIZE, MINIMIZE):
            raise LensError(f"sign must be {MAXIMIZE!r} or {MINIMIZE!r}, got {self.sign!r}")
        if not 0 <= self.layer < len(net.layers):
            raise LensError(f"Layer {self.layer} out of range for {len(net.layers)} layers")
        channels = layer_channels(net, self.layer)
        if not 0 <= self.channel < channels:
            raise LensError(f"Channel {self.channel} out of range for layer {self.layer} "
                            f"({net.layers[self.layer].name}, {channels} channels)")

    @property
    def label(self) -> str:
        return f"{self.layer}_{self.channel}"


@dataclass
class VizConfig:
    steps: int = 256
    lr: float = 0.05
    jitter1: int = 8
    scale_min: float = 0.95
    scale_max: float = 1.05
    rotate: float = 5.0
    jitter2: int = 4
    augment: bool = True
    init_std: float = 0.01
    image_size: int = 32
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise LensError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise LensError(f"lr must be >= 0, got {self.lr}")
        if not self.scale_min <= 1.0 <= self.scale_max:
            raise LensError(f"Scale range [{self.scale_min}, {self.scale_max}] must bracket 1.0")
        if self.jitter1 < 0 or self.jitter2 < 0 or self.rotate < 0:
            raise LensError("Jitter and rotation ranges must be nonnegative")


@dataclass
class VizResult:
    objective: VizObjective
    image: np.ndarray
    initial_objective: float
    final_objective: float
    steps: int
    seed: int

    @property
    def improved(self) -> bool:
        if self.objective.sign == MAXIMIZE:
            return self.final_objective > self.initial_objective
        return self.final_objective < self.initial_objective

    def summary(self) -> Dict:
        return {"objective": asdict(self.objective), "initial": self.initial_objective,
                "final": self.final_objective, "steps": self.steps, "seed": self.seed}


def layer_channels(net: Network, layer: int) -> int:
    """Channel count of a layer's output, found by a forward pass on a blank image"""
    size = 32
    blank = np.zeros((1, net.input_channels, size, size))
    return int(forward(net, blank, stop_at=layer, param_grads=False).shape[1])


def activation(net: Network, objective: VizObjective, image: np.ndarray) -> float:
    """Mean activation of the objective's channel for a (C, H, W) image"""
    out = forward(net, image[None], stop_at=objective.layer, param_grads=False)
    return float(out.data[0, objective.channel].mean())


def visualize(net: Network, objective: VizObjective, config: VizConfig,
              color_matrix=None) -> VizResult:
    """Optimise an image spectrum for `config.steps` Adam steps against the objective"""
    config.validate()
    objective.validate(net)
    channels = net.input_channels
    matrix = np.eye(channels) if color_matrix is None else \
        validate_color_matrix(color_matrix, channels)
    spectrum = fourier_param_init(config.image_size, config.image_size, channels,
                                  seed=config.seed, std=config.init_std)
    params = Tensor(spectrum.params, requires_grad=True, name="spectrum")
    optimizer = Adam({"spectrum": params})
    rng = np.random.default_rng(config.seed)
    direction = -1.0 if objective.sign == MAXIMIZE else 1.0

    initial = activation(net, objective, decode(spectrum, matrix))
    started = time.time()
    for step in range(config.steps):
        graph = Graph()
        image = spectral_decode(params, spectrum.scale, spectrum.height, spectrum.width, graph)
        image = sigmoid(channel_mix(image, matrix, graph), graph)
        if config.augment:
            aug = sample_augmentation(rng, config.jitter1, (config.scale_min, config.scale_max),
                                      config.rotate, config.jitter2)
            image = augment(image, aug, graph)
        out = forward(net, image, graph=graph, stop_at=objective.layer, param_grads=False)
        loss = scale(channel_mean(out, objective.channel, graph), direction, graph)
        value = float(loss.data)
        if not math.isfinite(value):
            raise LensError(f"Objective {objective.label} became {value} at step {step}")
        if config.lr == 0:
            continue
        graph.run_backward(loss, np.array(1.0))
        optimizer.step({"spectrum": params.grad}, config.lr)

    final_image = decode(SpectrumImage(params.data, spectrum.height, spectrum.width, spectrum.scale),
                         matrix)
    final = activation(net, objective, final_image)
    logger.debug(f"Visualised layer {objective.layer} channel {objective.channel}: "
                 f"{initial:.4f} -> {final:.4f} in {time.time() - started:.1f}s")
    return VizResult(objective=objective, image=final_image, initial_objective=initial,
                     final_objective=final, steps=config.steps, seed=config.seed)


def visualize_layer(net: Network, layer: int, channels: Optional[Sequence[int]], config: VizConfig,
                    color_matrix=None, workers: int = 1) -> List[VizResult]:
    """One visualisation job per channel; channel c uses seed config.seed + c"""
    if channels is None:
        channels = range(layer_channels(net, layer))
    jobs = []
    for channel in channels:
        job_config = replace(config, seed=config.seed + int(channel))
        jobs.append((f"{layer}_{channel}",
                     (net, VizObjective(layer, int(channel)), job_config, color_matrix)))
    logger.info(f"Visualising {len(jobs)} channels of layer {layer} ({config.steps} steps each)")
    return run_jobs(visualize, jobs, workers=workers)


def random_neurons(net: Network, count: int, seed: int = 0) -> List[VizObjective]:
    """Distinct (conv layer, channel) objectives sampled uniformly over layers, then channels"""
    rng = np.random.default_rng(seed)
    available: Dict[int, List[int]] = {
        index: list(range(net.layers[index].out_channels)) for index in net.conv_layer_indices()
    }
    total = sum(len(v) for v in available.values())
    if count > total:
        raise LensError(f"Requested {count} neurons, the network has {total} conv channels")
    chosen: List[VizObjective] = []
    while len(chosen) < count:
        layers = [index for index, free in available.items() if free]
        layer = layers[int(rng.integers(len(layers)))]
        channel = available[layer].pop(int(rng.integers(len(available[layer]))))
        chosen.append(VizObjective(layer, channel))
    return chosen


def contact_sheet(images: Sequence[np.ndarray], columns: int = 8, pad: int = 1,
                  background: float = 1.0) -> np.ndarray:
    """Tile (C, H, W) images row-major into one (C, H', W') sheet"""
    if not images:
        raise LensError("contact_sheet needs at least one image")
    channels, height, width = images[0].shape
    columns = max(1, min(columns, len(images)))
    rows = -(-len(images) // columns)
    sheet = np.full((channels, rows * (height + pad) - pad, columns * (width + pad) - pad),
                    background)
    for index, image in enumerate(images):
        if image.shape != (channels, height, width):
            raise LensError(f"Image {index} has shape {image.shape}, expected "
                            f"{(channels, height, width)}")
        r, c = divmod(index, columns)
        top, left = r * (height + pad), c * (width + pad)
        sheet[:, top:top + height, left:left + width] = image
    return sheet

