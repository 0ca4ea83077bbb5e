"""
Tensor and Graph primitives for the reverse-mode engine

A Tensor wraps a float64 numpy array plus an optional gradient slot. Operations
are recorded on an explicit Graph (one per forward pass) so that several
workers can share a network read-only while each owns its own Graph.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract"""


class GraphError(RuntimeError):
    """Raised on misuse of a recorded graph (e.g. a second backward pass)"""


class NumericalError(ArithmeticError):
    """Raised when an engine operation produces NaN or Inf"""


class Tensor:
    """n-dimensional float64 array with an attached gradient slot"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(())
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Share the data but drop gradient tracking"""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward_fn: BackwardFn


class Graph:
    """Tape of recorded operations in topological (recording) order"""

    def __init__(self):
        self.nodes: List[Node] = []
        self._ids: Dict[int, int] = {}
        self._tensors: List[Tensor] = []
        self._produced: set = set()
        self.output: Optional[Tensor] = None
        self.input: Optional[Tensor] = None
        self.params: Dict[str, Tensor] = {}
        self.consumed = False

    def tensor_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._ids:
            self._ids[key] = len(self._tensors)
            self._tensors.append(tensor)
        return self._ids[key]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn):
        if self.consumed:
            raise GraphError("Cannot record on a graph that has already been back-propagated")
        input_ids = tuple(self.tensor_id(t) for t in inputs)
        output_id = self.tensor_id(output)
        self.nodes.append(Node(op=op, inputs=input_ids, output=output_id, backward_fn=backward_fn))
        self._produced.add(output_id)
        self.output = output

    def run_backward(self, output: Tensor, seed: np.ndarray) -> Dict[int, np.ndarray]:
        """Propagate `seed` from `output`; fills grad slots of leaf tensors"""
        if self.consumed:
            raise GraphError("backward() called twice without a new forward pass")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"Seed shape {seed.shape} does not match output shape {output.shape}")
        if id(output) not in self._ids:
            raise GraphError("Output tensor was not produced by this graph")

        output_id = self._ids[id(output)]
        adjoints: Dict[int, np.ndarray] = {output_id: seed}
        for node in reversed(self.nodes):
            grad_out = adjoints.get(node.output)
            if grad_out is None:
                continue
            inputs = [self._tensors[i] for i in node.inputs]
            needs = tuple(t.requires_grad for t in inputs)
            grads = node.backward_fn(grad_out, needs)
            for tensor_id, tensor, grad in zip(node.inputs, inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor_id in adjoints:
                    adjoints[tensor_id] = adjoints[tensor_id] + grad
                else:
                    adjoints[tensor_id] = grad
            # intermediate adjoints are no longer needed once consumed
            if node.output != output_id:
                adjoints.pop(node.output, None)

        self.consumed = True
        for tensor_id, tensor in enumerate(self._tensors):
            if tensor_id in self._produced or not tensor.requires_grad:
                continue
            grad = adjoints.get(tensor_id)
            tensor.grad = grad if grad is not None else np.zeros_like(tensor.data)
        return adjoints


def record_op(graph: Optional[Graph], op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: BackwardFn) -> Tensor:
    """Wrap `out_data` in a Tensor and record it when any input needs a gradient"""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires and graph is not None)
    if graph is not None and requires:
        graph.record(op, inputs, out, backward_fn)
    return out


def backward(graph: Graph, seed) -> Tuple[Dict[str, np.ndarray], Optional[np.ndarray]]:
    """Back-propagate `seed` from the graph output

    Returns:
        (gradients keyed by parameter name, gradient w.r.t. the graph input or None)
    """
    if graph.output is None:
        raise GraphError("Graph has no recorded output; run forward() first")
    graph.run_backward(graph.output, seed)
    param_grads = {
        name: tensor.grad for name, tensor in graph.params.items()
        if tensor.requires_grad and tensor.grad is not None
    }
    input_grad = graph.input.grad if graph.input is not None and graph.input.requires_grad else None
    return param_grads, input_grad


def check_finite(array: np.ndarray, where: str):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"Non-finite values produced by {where}")


# Elementwise and reduction ops


def add(a: Tensor, b: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def _backward(g, needs):
        return g if needs[0] else None, g if needs[1] else None

    return record_op(graph, "add", (a, b), a.data + b.data, _backward)


def mul(a: Tensor, b: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _backward(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return record_op(graph, "mul", (a, b), a.data * b.data, _backward)


def square(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    def _backward(g, needs):
        return (2.0 * x.data * g,)

    return record_op(graph, "square", (x,), x.data * x.data, _backward)


def tensor_sum(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    def _backward(g, needs):
        return (np.full(x.shape, float(g), dtype=np.float64),)

    return record_op(graph, "sum", (x,), np.array(x.data.sum()), _backward)


def scale(x: Tensor, factor: float, graph: Optional[Graph] = None) -> Tensor:
    def _backward(g, needs):
        return (g * factor,)

    return record_op(graph, "scale", (x,), x.data * factor, _backward)


def sigmoid(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g, needs):
        return (g * out * (1.0 - out),)

    return record_op(graph, "sigmoid", (x,), out, _backward)


def channel_mean(x: Tensor, channel: int, graph: Optional[Graph] = None) -> Tensor:
    """Mean activation of one channel of an (N, C, H, W) tensor, averaged over N, H, W"""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_mean expects (N, C, H, W), got {x.shape}")
    if not 0 <= channel < x.shape[1]:
        raise ShapeError(f"channel {channel} out of range for {x.shape[1]} channels")
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def _backward(g, needs):
        grad = np.zeros_like(x.data)
        grad[:, channel] = float(g) / count
        return (grad,)

    return record_op(graph, "channel_mean", (x,), np.array(x.data[:, channel].mean()), _backward)
