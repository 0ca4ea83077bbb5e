"""
Layer functions for the reverse-mode engine

Shape contracts (N = batch):
    conv2d           x (N, C, H, W), w (O, C, k, k), b (O,) -> (N, O, H + 2p - k + 1, W + 2p - k + 1)
    relu             any -> same
    maxpool2x2       (N, C, H, W) -> (N, C, H // 2, W // 2); a trailing odd row/column is dropped
    global_avg_pool  (N, C, H, W) -> (N, C)
    flatten          (N, ...) -> (N, prod(...))
    linear           x (N, I), w (O, I), b (O,) -> (N, O)
    softmax          (N, K) -> (N, K), rows sum to 1
    cross_entropy    logits (N, K), labels (N,) -> scalar mean negative log-likelihood
"""

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Graph, ShapeError, Tensor, record_op


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, H - k + 1, W - k + 1, k, k) read-only view"""
    return sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding: int = 0,
           graph: Optional[Graph] = None, name: str = "conv2d") -> Tensor:
    """Stride-1 2D cross-correlation with zero padding"""
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected input (N, C, H, W), got {x.shape}")
    out_ch, in_ch, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"{name}: only square kernels are supported, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, layer expects {in_ch}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be non-negative")
    k = kh
    height = x.shape[2] + 2 * padding - k + 1
    width = x.shape[3] + 2 * padding - k + 1
    if height <= 0 or width <= 0:
        raise ShapeError(f"{name}: input {x.shape[2]}x{x.shape[3]} too small for kernel {k} "
                         f"with padding {padding}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _windows(xp, k)
    out = np.einsum("nchwij,ocij->nohw", cols, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def _backward(g, needs):
        grad_x = grad_w = grad_b = None
        if needs[1]:
            grad_w = np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)
        if len(needs) > 2 and needs[2]:
            grad_b = g.sum(axis=(0, 2, 3))
        if needs[0]:
            full = k - 1
            gp = np.pad(g, ((0, 0), (0, 0), (full, full), (full, full)))
            flipped = w.data[:, :, ::-1, ::-1]
            grad_xp = np.einsum("nohwij,ocij->nchw", _windows(gp, k), flipped, optimize=True)
            if padding:
                grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
            grad_x = np.ascontiguousarray(grad_xp)
        return (grad_x, grad_w) if b is None else (grad_x, grad_w, grad_b)

    return record_op(graph, name, inputs, out, _backward)


def relu(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    active = x.data > 0

    def _backward(g, needs):
        return (g * active,)

    return record_op(graph, "relu", (x,), np.where(active, x.data, 0.0), _backward)


def maxpool2x2(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise ShapeError(f"maxpool2x2: input {h}x{w} is smaller than the 2x2 window")
    cropped = x.data[:, :, :2 * oh, :2 * ow]
    blocks = cropped.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    # ties resolve to the first element of the window
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def _backward(g, needs):
        grad_blocks = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(grad_blocks, winner[..., None], g[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.data)
        full[:, :, :2 * oh, :2 * ow] = grad.reshape(n, c, 2 * oh, 2 * ow)
        return (full,)

    return record_op(graph, "maxpool2x2", (x,), out, _backward)


def global_avg_pool(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, C, H, W), got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def _backward(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return record_op(graph, "global_avg_pool", (x,), x.data.mean(axis=(2, 3)), _backward)


def flatten(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    shape = x.shape

    def _backward(g, needs):
        return (g.reshape(shape),)

    return record_op(graph, "flatten", (x,), x.data.reshape(shape[0], -1), _backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None, graph: Optional[Graph] = None,
           name: str = "linear") -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"{name}: expected input (N, features), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: input has {x.shape[1]} features, layer expects {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def _backward(g, needs):
        grad_x = g @ w.data if needs[0] else None
        grad_w = g.T @ x.data if needs[1] else None
        if b is None:
            return grad_x, grad_w
        return grad_x, grad_w, (g.sum(axis=0) if needs[2] else None)

    return record_op(graph, name, inputs, out, _backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (N, K) array"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, graph: Optional[Graph] = None) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} mismatch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    log_probs = log_softmax(logits.data)
    loss = -log_probs[np.arange(n), labels].mean()

    def _backward(g, needs):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (float(g) / n),)

    return record_op(graph, "cross_entropy", (logits,), np.array(loss), _backward)
