"""
Binary pruning masks and anti-random mask pairs

A mask keeps a parameter where it holds 1 and prunes it where it holds 0.
An anti-random sibling is the elementwise complement, so a pair of siblings
partitions every prunable tensor of the parent.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from backend.engine.network import Network

logger = logging.getLogger(__name__)


class MaskError(ValueError):
    """Raised when a mask does not fit the tensors it is applied to"""


@dataclass
class PruneMask:
    """One binary tensor per prunable parameter tensor"""
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    sparsity: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.sparsity < 1.0:
            raise MaskError(f"Sparsity must lie in (0, 1), got {self.sparsity}")
        for name, mask in self.masks.items():
            if not np.all((mask == 0) | (mask == 1)):
                raise MaskError(f"Mask for {name} contains values other than 0 and 1")

    def complement(self) -> "PruneMask":
        return PruneMask({name: 1.0 - mask for name, mask in self.masks.items()},
                         sparsity=1.0 - self.sparsity)

    def ones_count(self) -> Dict[str, int]:
        return {name: int(mask.sum()) for name, mask in self.masks.items()}

    def flatten(self) -> np.ndarray:
        if not self.masks:
            return np.zeros(0)
        return np.concatenate([mask.ravel() for mask in self.masks.values()])

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Per-tensor ones-count and achieved sparsity for run manifests"""
        return {
            name: {"size": int(mask.size), "ones": int(mask.sum()),
                   "sparsity": float(1.0 - mask.sum() / mask.size)}
            for name, mask in self.masks.items()
        }


def _validate_shapes(param_shapes: Mapping[str, Tuple[int, ...]]):
    if not param_shapes:
        raise MaskError("At least one prunable tensor shape is required")
    for name, shape in param_shapes.items():
        if any(int(dim) <= 0 for dim in shape):
            raise MaskError(f"Tensor {name} has a non-positive dimension: {tuple(shape)}")


def antirandom_pair(param_shapes: Mapping[str, Tuple[int, ...]],
                    seed: int) -> Tuple[PruneMask, PruneMask]:
    """Draw a 50% mask per tensor and pair it with its complement

    Odd-sized tensors give the first mask floor(n / 2) ones and the sibling ceil(n / 2).
    """
    _validate_shapes(param_shapes)
    rng = np.random.default_rng(seed)
    first: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes.items():
        size = int(np.prod(shape))
        keep = rng.permutation(size)[:size // 2]
        mask = np.zeros(size)
        mask[keep] = 1.0
        first[name] = mask.reshape(shape)
        if size % 2:
            logger.debug(f"Tensor {name} has odd size {size}; siblings keep {size // 2} "
                         f"and {size - size // 2} weights")
    mask = PruneMask(first, sparsity=0.5)
    return mask, PruneMask({n: 1.0 - m for n, m in first.items()}, sparsity=0.5)


def random_mask(param_shapes: Mapping[str, Tuple[int, ...]], sparsity: float,
                seed: int) -> PruneMask:
    """Independent random mask keeping round(n * (1 - sparsity)) weights per tensor"""
    _validate_shapes(param_shapes)
    rng = np.random.default_rng(seed)
    masks = {}
    for name, shape in param_shapes.items():
        size = int(np.prod(shape))
        mask = np.zeros(size)
        mask[rng.permutation(size)[:round(size * (1.0 - sparsity))]] = 1.0
        masks[name] = mask.reshape(shape)
    return PruneMask(masks, sparsity=sparsity)


def cartesian_distance(a, b) -> float:
    """sqrt(sum |a_i - b_i|) between two bit vectors"""
    a = np.asarray(a.flatten() if isinstance(a, PruneMask) else a, dtype=np.float64).ravel()
    b = np.asarray(b.flatten() if isinstance(b, PruneMask) else b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MaskError(f"Bit vectors differ in length: {a.size} vs {b.size}")
    return math.sqrt(float(np.abs(a - b).sum()))


def apply_mask(net: Network, mask: PruneMask) -> Network:
    """Clone `net`, zero the pruned weights and install the mask for gradient freezing"""
    for name, values in mask.masks.items():
        if name not in net.params:
            raise MaskError(f"Mask names tensor {name}, which the network does not have")
        if values.shape != net.params[name].shape:
            raise MaskError(f"Mask for {name} has shape {values.shape}, "
                            f"parameter has {net.params[name].shape}")
    child = net.clone()
    for name, values in mask.masks.items():
        child.set_mask(name, values)
    child.apply_masks()
    return child


def prunable_shapes(net: Network) -> Dict[str, Tuple[int, ...]]:
    return {name: net.params[name].shape for name in net.prunable()}
