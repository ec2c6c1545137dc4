"""Central finite-difference verification of analytic gradients.

The harness re-evaluates a loss closure under elementwise parameter
perturbations and compares against one reverse-mode pass.  Run it on
float64 graphs; float32 round-off swamps the h=1e-5 differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import ParamStore


@dataclass(frozen=True)
class GradCheckRow:
    param: str
    loss: str
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    rows: tuple[GradCheckRow, ...]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    def passed(self) -> bool:
        return all(r.max_rel_err < self.tolerance for r in self.rows)

    def failures(self) -> tuple[GradCheckRow, ...]:
        return tuple(r for r in self.rows if r.max_rel_err >= self.tolerance)

    def per_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.rows:
            out[r.param] = max(out.get(r.param, 0.0), r.max_rel_err)
        return out

    def to_csv(self) -> str:
        lines = ["param,max_rel_err,pass"]
        for name, err in self.per_param().items():
            lines.append(f"{name},{err:.3e},{int(err < self.tolerance)}")
        return "\n".join(lines) + "\n"


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def grad_check(
    loss_fn,
    stores: dict[str, ParamStore],
    h: float = 1e-5,
    tolerance: float = 1e-5,
    rel_floor: float = 1e-3,
    max_elements: int | None = None,
    scope: dict[str, tuple[str, ...]] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of every loss against central differences.

    ``loss_fn`` must be a pure function of the current parameter values,
    returning a dict of scalar Tensors (all losses are probed in one
    perturbation sweep).  ``max_elements`` limits the probed elements per
    parameter (evenly strided) for quick smoke runs; None checks all.
    Relative errors use ``|a-f| / max(|a|, |f|, rel_floor)``, which reads as
    an absolute tolerance for near-zero gradients.

    ``scope`` maps a store name to the loss names checked for its parameters.
    Losses that deliberately stop gradients at a group boundary (adversarial
    terms seen from the other group) must be scoped out: their analytic
    gradient is zero by construction while the finite difference sees the
    value change through the detached path.
    """
    losses = loss_fn()
    loss_names = list(losses)

    analytic: dict[tuple[str, str], np.ndarray] = {}
    for lname in loss_names:
        for store in stores.values():
            store.zero_grads()
        losses = loss_fn()
        losses[lname].backward()
        for sname, store in stores.items():
            for pname, p in store.items():
                g = p.tensor.grad
                analytic[(lname, f"{sname}/{pname}")] = (
                    np.zeros_like(p.tensor.data) if g is None else g.copy()
                )

    rows = []
    for sname, store in stores.items():
        checked = loss_names if scope is None else [n for n in loss_names if n in scope.get(sname, ())]
        if not checked:
            continue
        for pname, p in store.items():
            data = p.tensor.data
            flat = data.reshape(-1)
            n = flat.size
            if max_elements is not None and n > max_elements:
                idx = np.linspace(0, n - 1, max_elements).astype(int)
            else:
                idx = np.arange(n)
            fd = {lname: np.zeros(len(idx), dtype=np.float64) for lname in checked}
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                plus = {k: v.item() for k, v in loss_fn().items()}
                flat[i] = orig - h
                minus = {k: v.item() for k, v in loss_fn().items()}
                flat[i] = orig
                for lname in checked:
                    fd[lname][j] = (plus[lname] - minus[lname]) / (2.0 * h)
            full = f"{sname}/{pname}"
            for lname in checked:
                ana = analytic[(lname, full)].reshape(-1)[idx]
                rows.append(
                    GradCheckRow(
                        param=full,
                        loss=lname,
                        max_rel_err=_rel_err(ana, fd[lname], rel_floor),
                    )
                )
    return GradCheckReport(rows=tuple(rows), tolerance=tolerance)
