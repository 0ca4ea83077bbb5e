"""
SGD with momentum and Adam over named parameter arrays

Masks take precedence over optimizer state: after every step the masked
entries of both the parameter and its momentum/moment buffers are zero.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .network import Network
from .tensor import NumericalError, Tensor

logger = logging.getLogger(__name__)


def _check_step(lr: float, momentum: float = 0.0):
    if not lr > 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"Momentum must lie in [0, 1), got {momentum}")


def _finish(name: str, tensor: Tensor, mask: Optional[np.ndarray], *buffers: np.ndarray):
    if mask is not None:
        tensor.data *= mask
        for buffer in buffers:
            buffer *= mask
    if not np.all(np.isfinite(tensor.data)):
        raise NumericalError(f"Parameter {name} overflowed during the optimizer step")


@dataclass
class SGDState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
             momentum: float = 0.0, state: Optional[SGDState] = None,
             masks: Optional[Mapping[str, np.ndarray]] = None,
             weight_decay: float = 0.0) -> SGDState:
    """v <- momentum * v + g ; p <- p - lr * v"""
    _check_step(lr, momentum)
    state = state or SGDState()
    masks = masks or {}
    for name, grad in grads.items():
        tensor = params[name]
        if weight_decay:
            grad = grad + weight_decay * tensor.data
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(tensor.data)
            state.velocity[name] = velocity
        velocity *= momentum
        velocity += grad
        tensor.data -= lr * velocity
        _finish(name, tensor, masks.get(name), velocity)
    return state


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              lr: float, masks: Optional[Mapping[str, np.ndarray]] = None) -> AdamState:
    """One bias-corrected Adam update"""
    _check_step(lr)
    masks = masks or {}
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        tensor = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        _finish(name, tensor, masks.get(name), m, v)
    return state


class SGD:
    """Stateful SGD bound to a network; honours the network's masks"""

    def __init__(self, net: Network, momentum: float = 0.9, weight_decay: float = 0.0):
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = SGDState()

    def step(self, grads: Mapping[str, np.ndarray], lr: float, momentum: Optional[float] = None):
        sgd_step(self.net.params, grads, lr,
                 momentum=self.momentum if momentum is None else momentum,
                 state=self.state, masks=self.net.masks, weight_decay=self.weight_decay)


class Adam:
    """Stateful Adam over an arbitrary dict of tensors"""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, masks: Optional[Mapping[str, np.ndarray]] = None):
        self.params = params
        self.masks = masks
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[str, np.ndarray], lr: float):
        adam_step(self.state, self.params, grads, lr, masks=self.masks)
