"""The six training losses and their weighted combination.

Adversarial terms use the numerically stable logit form: with D = sigmoid(l),
``-log D = softplus(-l)`` and ``-log(1 - D) = softplus(l)``.  Generator
adversarial terms are non-saturating (``-log D(fake)``).  Discriminator terms
receive detached fakes, generator terms see frozen discriminator parameters,
so each optimisation group only ever receives its own gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

GENERATOR_TERMS = ("rec", "cyc", "age", "adv_z_g", "adv_img_t_g", "adv_img_s_g")
DISCRIMINATOR_TERMS = ("adv_z_d", "adv_img_d")
ALL_TERMS = GENERATOR_TERMS + DISCRIMINATOR_TERMS


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN/Inf; carries the term name."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the six generator-side objective terms.

    l0 reconstruction, l1 cycle, l2 age, l3 latent-adversarial, l4/l5 the two
    image-adversarial terms (synthesis at target/source age).
    """

    l0: float = 1.0
    l1: float = 0.1
    l2: float = 0.01
    l3: float = 0.1
    l4: float = 1.0
    l5: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in self.as_tuple()):
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.l0, self.l1, self.l2, self.l3, self.l4, self.l5)


@dataclass(frozen=True)
class LossReport:
    """Per-term scalar values of one training step."""

    step: int
    rec: float
    cyc: float
    age: float
    adv_z_g: float
    adv_img_t_g: float
    adv_img_s_g: float
    adv_z_d: float
    adv_img_d: float
    gen_total: float
    disc_total: float
    wall_ms: float = 0.0

    def terms(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in ALL_TERMS}

    def to_line(self) -> str:
        vals = ",".join(f"{getattr(self, name):.6g}" for name in ALL_TERMS)
        return f"{self.step},{vals},{self.wall_ms:.3f}"


def rec_loss(target: Tensor, output: Tensor) -> Tensor:
    """Mean absolute difference over all channels and voxels."""
    return dc.mean_all(dc.abs_(dc.sub(target, output)))


def cyc_loss(target: Tensor, cycled: Tensor) -> Tensor:
    """Cycle-consistency reconstruction; same L1 form as ``rec_loss``."""
    return rec_loss(target, cycled)


def age_loss(logits_t: Tensor, target_bins, logits_s: Tensor, source_bins) -> Tensor:
    """Cross-entropy of predicted ages of both synthesised anatomies."""
    return dc.add(
        dc.cross_entropy_logits(logits_t, target_bins),
        dc.cross_entropy_logits(logits_s, source_bins),
    )


def adv_z_losses(dz, z: Tensor, z_prior: np.ndarray) -> tuple[Tensor, Tensor]:
    """Latent adversarial pair: (discriminator loss, encoder loss).

    The discriminator is trained to score uniform prior samples as real and
    encoder outputs (detached) as fake; the encoder loss is the
    non-saturating ``-log D_z(z)`` with frozen discriminator weights.
    """
    logit_prior = dz.logit(Tensor(np.asarray(z_prior, dtype=z.dtype)))
    logit_fake = dz.logit(z.detach())
    d_loss = dc.add(
        dc.mean_all(dc.softplus(dc.scale(logit_prior, -1.0))),
        dc.mean_all(dc.softplus(logit_fake)),
    )
    g_loss = dc.mean_all(dc.softplus(dc.scale(dz.logit(z, frozen=True), -1.0)))
    return d_loss, g_loss


def adv_img_losses(
    dimg,
    x_real: Tensor,
    a_s: np.ndarray,
    fake_t: Tensor,
    a_t: np.ndarray,
    fake_s: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Conditional image-adversarial losses: (d_loss, g_loss_t, g_loss_s).

    The discriminator sees (real, a_s) as real and the two synthesised
    anatomies, conditioned on their own target ages, as fake.  Each real/fake
    pairing contributes a full GAN cross-entropy, so the real term enters
    twice in ``d_loss``.
    """
    batch = x_real.shape[0]
    a_s_arr = np.asarray(a_s, dtype=x_real.dtype)
    a_t_arr = np.asarray(a_t, dtype=x_real.dtype)

    stacked = dc.concat([x_real.detach(), fake_t.detach(), fake_s.detach()], axis=0)
    conds = Tensor(np.concatenate([a_s_arr, a_t_arr, a_s_arr], axis=0))
    logits, cached = dimg.logit_recording(stacked, conds)
    l_real = dc.narrow(logits, 0, 0, batch)
    l_fake_t = dc.narrow(logits, 0, batch, batch)
    l_fake_s = dc.narrow(logits, 0, 2 * batch, batch)
    d_loss = dc.add(
        dc.scale(dc.mean_all(dc.softplus(dc.scale(l_real, -1.0))), 2.0),
        dc.add(
            dc.mean_all(dc.softplus(l_fake_t)),
            dc.mean_all(dc.softplus(l_fake_s)),
        ),
    )

    # generator side: same forward values as the detached fake rows above, so
    # replay them and only build the input-gradient path (weights frozen)
    fakes = dc.concat([fake_t, fake_s], axis=0)
    g_conds = Tensor(np.concatenate([a_t_arr, a_s_arr], axis=0))
    g_logits = dimg.logit_replay(fakes, g_conds, [c[batch:] for c in cached])
    g_t = dc.mean_all(dc.softplus(dc.scale(dc.narrow(g_logits, 0, 0, batch), -1.0)))
    g_s = dc.mean_all(dc.softplus(dc.scale(dc.narrow(g_logits, 0, batch, batch), -1.0)))
    return d_loss, g_t, g_s


def total_loss(terms: dict[str, Tensor], weights: LossWeights, step: int = 0):
    """Weighted objective: (generator_total, discriminator_total, LossReport).

    Raises :class:`NonFiniteLossError` naming the first non-finite term.
    """
    for name in ALL_TERMS:
        if name not in terms:
            raise KeyError(f"missing loss term {name!r}")
        value = terms[name].data
        if not np.isfinite(value):
            raise NonFiniteLossError(f"loss term {name!r} is non-finite: {value}")
    w = weights
    gen_total = _weighted_sum(
        terms, ("rec", "cyc", "age", "adv_z_g", "adv_img_t_g", "adv_img_s_g"),
        (w.l0, w.l1, w.l2, w.l3, w.l4, w.l5),
    )
    disc_total = _weighted_sum(terms, ("adv_z_d", "adv_img_d"), (w.l3, w.l4))
    report = LossReport(
        step=step,
        gen_total=gen_total.item(),
        disc_total=disc_total.item(),
        **{name: terms[name].item() for name in ALL_TERMS},
    )
    return gen_total, disc_total, report


def _weighted_sum(terms, names, weights) -> Tensor:
    acc: Tensor | None = None
    for name, w in zip(names, weights):
        if w == 0.0:
            continue
        part = dc.scale(terms[name], w)
        acc = part if acc is None else dc.add(acc, part)
    if acc is None:
        acc = Tensor(np.zeros((), dtype=terms[names[0]].dtype))
    return acc


def timed_report(report: LossReport, started: float, deterministic: bool) -> LossReport:
    """Attach wall time; suppressed (0.0) in deterministic mode so logs are
    byte-reproducible across runs."""
    if deterministic:
        return report
    elapsed = (time.perf_counter() - started) * 1000.0
    return replace(report, wall_ms=elapsed)
