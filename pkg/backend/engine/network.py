"""
Network container: ordered layer descriptors, named parameters and optional masks
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import layers as F
from .tensor import Graph, ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    padding: Optional[int] = None  # None means "same"
    kind: str = field(default="conv2d", init=False)

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            f"{self.name}.weight": (self.out_channels, self.in_channels,
                                    self.kernel_size, self.kernel_size),
            f"{self.name}.bias": (self.out_channels,),
        }


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int
    kind: str = field(default="linear", init=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }


@dataclass(frozen=True)
class ReLU:
    name: str = "relu"
    kind: str = field(default="relu", init=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}


@dataclass(frozen=True)
class MaxPool2x2:
    name: str = "pool"
    kind: str = field(default="maxpool2x2", init=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str = "gap"
    kind: str = field(default="global_avg_pool", init=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}


@dataclass(frozen=True)
class Flatten:
    name: str = "flatten"
    kind: str = field(default="flatten", init=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {}


Layer = Union[Conv2d, Linear, ReLU, MaxPool2x2, GlobalAvgPool, Flatten]
LAYER_KINDS = {
    "conv2d": Conv2d, "linear": Linear, "relu": ReLU,
    "maxpool2x2": MaxPool2x2, "global_avg_pool": GlobalAvgPool, "flatten": Flatten,
}


class Network:
    """Ordered layers with named float64 parameters and optional binary masks"""

    def __init__(self, layers: Sequence[Layer], params: Optional[Dict[str, Tensor]] = None,
                 masks: Optional[Dict[str, np.ndarray]] = None):
        self.layers: List[Layer] = list(layers)
        self.params: Dict[str, Tensor] = {}
        expected = self.param_shapes()
        for name, shape in expected.items():
            if params is not None and name in params:
                tensor = params[name]
                if tensor.shape != shape:
                    raise ShapeError(f"Parameter {name} has shape {tensor.shape}, expected {shape}")
            else:
                tensor = Tensor(np.zeros(shape))
            tensor.requires_grad = True
            tensor.name = name
            self.params[name] = tensor
        if params is not None:
            unknown = set(params) - set(expected)
            if unknown:
                raise ShapeError(f"Unknown parameters for this architecture: {sorted(unknown)}")
        self.masks: Dict[str, np.ndarray] = {}
        for name, mask in (masks or {}).items():
            self.set_mask(name, mask)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    @property
    def input_channels(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                return layer.in_channels
        raise ShapeError("Network has no convolutional layer to define its input channels")

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Linear):
                return layer.out_features
            if isinstance(layer, Conv2d):
                return layer.out_channels
        raise ShapeError("Network has no layer defining its output width")

    def prunable(self) -> List[str]:
        """Weight tensors of conv and linear layers; biases are never pruned"""
        return [
            f"{layer.name}.weight" for layer in self.layers
            if isinstance(layer, (Conv2d, Linear))
        ]

    def conv_layer_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2d)]

    def final_conv_index(self) -> int:
        indices = self.conv_layer_indices()
        if not indices:
            raise ShapeError("Network has no convolutional layer")
        return indices[-1]

    def set_mask(self, name: str, mask: np.ndarray):
        if name not in self.params:
            raise ShapeError(f"Mask given for unknown parameter {name}")
        mask = np.asarray(mask)
        if mask.shape != self.params[name].shape:
            raise ShapeError(f"Mask for {name} has shape {mask.shape}, "
                             f"expected {self.params[name].shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ShapeError(f"Mask for {name} must contain only 0 and 1")
        self.masks[name] = mask.astype(np.float64)

    def apply_masks(self):
        for name, mask in self.masks.items():
            self.params[name].data *= mask

    def clone(self) -> "Network":
        params = {name: Tensor(t.data.copy()) for name, t in self.params.items()}
        return Network(copy.deepcopy(self.layers), params,
                       {name: m.copy() for name, m in self.masks.items()})

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        for name, value in state.items():
            if name not in self.params or self.params[name].shape != value.shape:
                raise ShapeError(f"State entry {name} does not fit this network")
            self.params[name].data = np.array(value, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def same_architecture(self, other: "Network") -> bool:
        return self.layers == other.layers

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Network([{kinds}], params={self.num_parameters()})"


def forward(net: Network, x, graph: Optional[Graph] = None, stop_at: Optional[int] = None,
            param_grads: bool = True, input_grad: bool = False) -> Tensor:
    """Run the network on a batch

    Args:
        net: network to evaluate (masks are assumed already applied)
        x: (N, C, H, W) batch as Tensor or array
        graph: graph to record on; None runs without recording
        stop_at: return the output of this layer index instead of the logits
        param_grads: record parameter gradients; False leaves `net` untouched by backward
        input_grad: request the gradient with respect to `x`
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if input_grad:
        x.requires_grad = True
    if stop_at is not None and not 0 <= stop_at < len(net.layers):
        raise ShapeError(f"stop_at={stop_at} is not a valid layer index for {len(net.layers)} layers")

    def param(name: str) -> Tensor:
        tensor = net.params[name]
        return tensor if param_grads else tensor.detach()

    if graph is not None:
        graph.input = x
        if param_grads:
            graph.params = dict(net.params)

    h = x
    for index, layer in enumerate(net.layers):
        try:
            if isinstance(layer, Conv2d):
                h = F.conv2d(h, param(f"{layer.name}.weight"), param(f"{layer.name}.bias"),
                             padding=layer.pad, graph=graph, name=layer.name)
            elif isinstance(layer, Linear):
                h = F.linear(h, param(f"{layer.name}.weight"), param(f"{layer.name}.bias"),
                             graph=graph, name=layer.name)
            elif isinstance(layer, ReLU):
                h = F.relu(h, graph=graph)
            elif isinstance(layer, MaxPool2x2):
                h = F.maxpool2x2(h, graph=graph)
            elif isinstance(layer, GlobalAvgPool):
                h = F.global_avg_pool(h, graph=graph)
            elif isinstance(layer, Flatten):
                h = F.flatten(h, graph=graph)
            else:
                raise ShapeError(f"Unsupported layer {layer!r}")
        except ShapeError as e:
            raise ShapeError(f"layer {index} ({layer.name}): {e}") from e
        if stop_at is not None and index == stop_at:
            break

    if graph is not None:
        graph.output = h
    return h


def predict_proba(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax outputs for a batch of inputs without recording a graph"""
    outputs = []
    for start in range(0, len(x), batch_size):
        logits = forward(net, x[start:start + batch_size]).data
        outputs.append(F.softmax(logits))
    return np.concatenate(outputs, axis=0)


def desk_layers(in_channels: int = 3, num_classes: int = 10) -> List[Layer]:
    """conv(C->8)/relu/pool -> conv(8->16)/relu/pool -> conv(16->32)/relu -> gap -> linear(32->K)"""
    return [
        Conv2d("conv1", in_channels, 8, 3), ReLU("relu1"), MaxPool2x2("pool1"),
        Conv2d("conv2", 8, 16, 3), ReLU("relu2"), MaxPool2x2("pool2"),
        Conv2d("conv3", 16, 32, 3), ReLU("relu3"),
        GlobalAvgPool("gap"),
        Linear("fc", 32, num_classes),
    ]


def tiny_layers(in_channels: int = 3, num_classes: int = 10) -> List[Layer]:
    """Two-conv network used for quick experiments and tests"""
    return [
        Conv2d("conv1", in_channels, 4, 3), ReLU("relu1"), MaxPool2x2("pool1"),
        Conv2d("conv2", 4, 8, 3), ReLU("relu2"),
        GlobalAvgPool("gap"),
        Linear("fc", 8, num_classes),
    ]


PRESETS = {"desk": desk_layers, "tiny": tiny_layers}


def init_params(net: Network, seed: int) -> Network:
    """He-normal weights, zero biases"""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size ** 2
        elif isinstance(layer, Linear):
            fan_in = layer.in_features
        else:
            continue
        weight = net.params[f"{layer.name}.weight"]
        weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=weight.shape)
        net.params[f"{layer.name}.bias"].data = np.zeros(net.params[f"{layer.name}.bias"].shape)
    net.apply_masks()
    return net


def build_network(preset: str = "desk", in_channels: int = 3, num_classes: int = 10,
                  seed: int = 0) -> Network:
    if preset not in PRESETS:
        raise ShapeError(f"Unknown architecture preset {preset!r}; choose from {sorted(PRESETS)}")
    net = Network(PRESETS[preset](in_channels, num_classes))
    init_params(net, seed)
    logger.debug(f"Built {preset} network with {net.num_parameters()} parameters (seed={seed})")
    return net
