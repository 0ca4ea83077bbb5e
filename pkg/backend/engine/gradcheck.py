"""
Central finite-difference oracle for the engine's analytic gradients
"""

from typing import Dict, Tuple

import numpy as np

from .layers import cross_entropy
from .network import Network, forward
from .tensor import Graph, backward


def _loss(net: Network, x: np.ndarray, labels: np.ndarray) -> float:
    return float(cross_entropy(forward(net, x), labels).data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| relative to the tensor's gradient scale"""
    scale = max(float(np.max(np.abs(analytic))) + float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradient_check(net: Network, x: np.ndarray, labels: np.ndarray,
                   step: float = 1e-4) -> Tuple[float, Dict[str, float]]:
    """Compare backward() against central differences of the cross-entropy loss

    Returns:
        (max relative error over everything, per-tensor max relative error incl. "input")
    """
    x = np.asarray(x, dtype=np.float64)
    graph = Graph()
    logits = forward(net, x.copy(), graph=graph, input_grad=True)
    loss = cross_entropy(logits, labels, graph=graph)
    graph.output = loss
    param_grads, input_grad = backward(graph, np.array(1.0))

    errors: Dict[str, float] = {}
    for name, tensor in net.params.items():
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = _loss(net, x, labels)
            flat[i] = original - step
            minus = _loss(net, x, labels)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
        errors[name] = relative_error(param_grads[name], numeric)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = _loss(net, x, labels)
        flat[i] = original - step
        minus = _loss(net, x, labels)
        flat[i] = original
        numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
    errors["input"] = relative_error(input_grad, numeric)
    return max(errors.values()), errors
