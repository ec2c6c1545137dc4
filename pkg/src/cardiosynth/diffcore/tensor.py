"""Reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional backward closure and the
parent tensors it was computed from.  Calling ``backward()`` on a scalar
tensor walks the graph in reverse topological order and accumulates
gradients into ``.grad`` of every tensor that requires them.

Conventions kept throughout the op layer:
  * results are constants (no graph) when no input requires a gradient;
  * backward closures write fresh arrays or non-overlapping views, so
    in-place accumulation is safe;
  * gradient accumulation order is fixed by graph construction order, which
    makes training bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value (shares the array)."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode gradients of this scalar w.r.t. all graph inputs."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not np.isfinite(self.data):
            raise FloatingPointError("backward() on a non-finite loss")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first use)."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Graph node helper: constant when no parent requires a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)
