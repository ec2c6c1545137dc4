"""Differentiable operations on :class:`Tensor` (everything except convolution)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, accumulate, result


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g)

    return result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, -g)

    return result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = _t(x)
    c = float(c)

    def backward(g):
        accumulate(x, g * c)

    return result(x.data * c, (x,), backward)


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D bias along ``axis`` of x (broadcast over all other axes)."""
    x, b = _t(x), _t(b)
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[axis]:
        raise ValueError(f"bias_add: bias {b.shape} does not fit axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[axis] = -1
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward(g):
        if x.requires_grad:
            accumulate(x, g)
        if b.requires_grad:
            accumulate(b, g.sum(axis=reduce_axes))

    return result(x.data + b.data.reshape(shape), (x, b), backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    x, w = _t(x), _t(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")

    def backward(g):
        if x.requires_grad:
            accumulate(x, g @ w.data.T)
        if w.requires_grad:
            accumulate(w, x.data.T @ g)

    return result(x.data @ w.data, (x, w), backward)


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        accumulate(x, g * (x.data > 0))

    return result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _t(x)
    out = np.tanh(x.data)

    def backward(g):
        accumulate(x, g * (1.0 - out * out))

    return result(out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |v| in both directions
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    out = _sigmoid(x.data)

    def backward(g):
        accumulate(x, g * out * (1.0 - out))

    return result(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = _t(x)
    out = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0)

    def backward(g):
        accumulate(x, g * _sigmoid(x.data))

    return result(out, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    x = _t(x)

    def backward(g):
        accumulate(x, g * np.sign(x.data))

    return result(np.abs(x.data), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _t(x)

    def backward(g):
        accumulate(x, np.broadcast_to(g, x.data.shape))

    return result(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _t(x)
    n = x.data.size

    def backward(g):
        accumulate(x, np.broadcast_to(g / n, x.data.shape))

    return result(np.asarray(x.data.mean()), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _t(x)
    orig = x.data.shape

    def backward(g):
        accumulate(x, g.reshape(orig))

    return result(np.ascontiguousarray(x.data).reshape(shape), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_t(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accumulate(t, g[tuple(sl)])

    return result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = _t(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[sl] = g
        accumulate(x, buf)

    return result(np.ascontiguousarray(x.data[sl]), (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    x = _t(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        accumulate(x, out * (g - inner))

    return result(out, (x,), backward)


def broadcast_spatial(v: Tensor, spatial: tuple[int, int, int]) -> Tensor:
    """Expand (B, C) to (B, C, X, Y, Z) with constant spatial maps."""
    v = _t(v)
    if v.data.ndim != 2:
        raise ValueError(f"broadcast_spatial expects (B, C), got {v.shape}")
    b, c = v.data.shape
    out = np.broadcast_to(v.data.reshape(b, c, 1, 1, 1), (b, c) + tuple(spatial)).copy()

    def backward(g):
        accumulate(v, g.sum(axis=(2, 3, 4)))

    return result(out, (v,), backward)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy between logits (B, m) and integer targets (B,)."""
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ValueError(
            f"cross_entropy_logits: logits {logits.shape} vs targets {targets.shape}"
        )
    if targets.min() < 0 or targets.max() >= logits.data.shape[1]:
        raise ValueError("cross_entropy_logits: target index out of range")
    b = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(e.sum(axis=1, keepdims=True))
    nll = -log_probs[np.arange(b), targets]

    def backward(g):
        d = probs.copy()
        d[np.arange(b), targets] -= 1.0
        accumulate(logits, d * (g / b))

    return result(np.asarray(nll.mean()), (logits,), backward)
