"""Named parameter stores and the Adam optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class Param:
    tensor: Tensor
    m: np.ndarray  # first-moment estimate
    v: np.ndarray  # second-moment estimate


class ParamStore:
    """Ordered name -> parameter map with per-store Adam step count."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=requires_grad)
        self._params[name] = Param(tensor=t, m=np.zeros_like(t.data), v=np.zeros_like(t.data))
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def n_parameters(self) -> int:
        return sum(p.tensor.data.size for p in self._params.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update over every parameter in the store.

    Weight decay is decoupled: ``param -= lr * wd * param`` before the moment
    update.  Parameters with no gradient keep decaying moments.  Parameter
    arrays are rebound (not mutated) so live graphs keep their forward values.
    """
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in store._params.values():
        g = p.tensor.grad
        data = p.tensor.data
        if weight_decay:
            data = data - (lr * weight_decay) * data
        if g is None:
            p.m *= beta1
            p.v *= beta2
        else:
            p.m *= beta1
            p.m += (1.0 - beta1) * g
            p.v *= beta2
            p.v += (1.0 - beta2) * (g * g)
        update = lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
        p.tensor.data = (data - update).astype(data.dtype, copy=False)
