"""Training orchestration: alternating adversary/generator updates.

Per step and per sample the loop draws a target age bin different from the
source bin, synthesises the anatomy at the target age, maps it back to the
source age (cycle), and reconstructs at the source age; the adversary group
(latent + image discriminators) is updated on the discriminator objective
with generator outputs detached, then the generator group (encoder, decoder,
condition mapper) on the weighted generator objective.  The age predictor is
fitted on real anatomies with true age-bin labels, either jointly (default)
or in a pre-training phase, and acts as a frozen guide inside the age loss.

All randomness flows through one ``numpy.random.Generator`` captured in
checkpoints, so a resumed run reproduces the uninterrupted trajectory
bit-exactly in deterministic mode.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .conditioning import AgeBins, age_vector, bin_age, sample_target_bin, sex_vector
from .losses import (
    LossReport,
    LossWeights,
    adv_img_losses,
    adv_z_losses,
    age_loss,
    cyc_loss,
    rec_loss,
    timed_report,
    total_loss,
)
from .manifest import DatasetManifest, load_manifest
from .model import ModelConfig, SynthesisModel, pair_to_channels

CHECKPOINT_MAGIC = "CKPT1"


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = "runs/train"
    steps: int = 5000
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 1e-5
    sigma: float = 0.02
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_interval: int = 1000
    deterministic: bool = True
    p_mode: str = "joint"  # "joint" or "pretrained"
    p_pretrain_steps: int = 400
    model: ModelConfig = field(default_factory=ModelConfig)
    bins: AgeBins = field(default_factory=AgeBins)

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.p_mode not in ("joint", "pretrained"):
            raise ValueError(f"unknown p_mode {self.p_mode!r}")
        if self.model.n_age_bins != self.bins.n_bins:
            raise ValueError(
                f"model expects {self.model.n_age_bins} age bins, "
                f"binning has {self.bins.n_bins}"
            )


@dataclass
class TrainState:
    model: SynthesisModel
    rng: np.random.Generator
    step: int = 0


@dataclass
class TrainingData:
    x: np.ndarray  # (N, 2L, X, Y, Z) float32 one-hot channel stacks
    source_bins: np.ndarray  # (N,) int
    sexes: list[str]


@dataclass
class TrainResult:
    state: TrainState
    log_path: str
    checkpoint_path: str
    last_report: LossReport | None


def load_training_data(
    manifest: DatasetManifest, bins: AgeBins, split: str = "train"
) -> TrainingData:
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no '{split}' records")
    x = np.stack([pair_to_channels(manifest.load_pair(r)) for r in records])
    source_bins = np.array([bin_age(r.age, bins) for r in records], dtype=np.int64)
    return TrainingData(x=x, source_bins=source_bins, sexes=[r.sex for r in records])


@dataclass(frozen=True)
class StepNoise:
    """All random draws of one training step, frozen for re-evaluation."""

    tgt_bins: np.ndarray  # (B,) target age bin per sample
    a_t: np.ndarray  # (B, m) noisy target-age vectors
    a_s: np.ndarray  # (B, m) noisy source-age vectors
    sex: np.ndarray  # (B, 2) one-hot sex vectors
    z_prior: np.ndarray  # (B, n_z) uniform prior samples


def sample_step_noise(
    rng: np.random.Generator, src_bins, sexes, m: int, sigma: float, n_z: int
) -> StepNoise:
    """Draw target bins, condition noise and prior samples in a fixed order."""
    tgt_bins = np.array(
        [sample_target_bin(int(i), m, rng) for i in src_bins], dtype=np.int64
    )
    a_t = np.stack([age_vector(int(i), m, sigma, rng) for i in tgt_bins])
    a_s = np.stack([age_vector(int(i), m, sigma, rng) for i in src_bins])
    sex = np.stack([sex_vector(s) for s in sexes])
    z_prior = rng.uniform(-1.0, 1.0, size=(len(tgt_bins), n_z))
    return StepNoise(tgt_bins=tgt_bins, a_t=a_t, a_s=a_s, sex=sex, z_prior=z_prior)


def compute_loss_terms(
    model: SynthesisModel, x_np: np.ndarray, src_bins, noise: StepNoise
) -> dict[str, dc.Tensor]:
    """Build the full objective graph for one batch (no parameter updates).

    Runs target-age synthesis, self-reconstruction and the cycle, then every
    loss term of the weighted objective plus the age predictor's supervised
    fit on the real anatomies (key ``pred_fit``).
    """
    dt = model.np_dtype
    b = x_np.shape[0]
    x = dc.Tensor(np.ascontiguousarray(x_np, dtype=dt))
    cond = dc.Tensor(
        np.concatenate(
            [
                np.concatenate([noise.a_t, noise.sex], 1),
                np.concatenate([noise.a_s, noise.sex], 1),
            ]
        ).astype(dt)
    )

    z = model.encoder.forward(x)
    z_c = model.mapper.forward(cond)
    y = model.decoder.forward(dc.concat([z, z], axis=0), z_c)
    fake_t = dc.narrow(y, 0, 0, b)
    fake_s = dc.narrow(y, 0, b, b)
    z_cycle = model.encoder.forward(fake_t)
    cycled = model.decoder.forward(z_cycle, dc.narrow(z_c, 0, b, b))

    p_logits = model.predictor.forward(dc.concat([fake_t, fake_s], axis=0), frozen=True)
    d_z, g_z = adv_z_losses(model.dz, z, noise.z_prior.astype(dt))
    d_img, g_t, g_s = adv_img_losses(
        model.dimg, x, noise.a_s, fake_t, noise.a_t, fake_s
    )
    fit_logits = model.predictor.forward(x)
    return {
        "rec": rec_loss(x, fake_s),
        "cyc": cyc_loss(x, cycled),
        "age": age_loss(
            dc.narrow(p_logits, 0, 0, b),
            noise.tgt_bins,
            dc.narrow(p_logits, 0, b, b),
            src_bins,
        ),
        "adv_z_g": g_z,
        "adv_img_t_g": g_t,
        "adv_img_s_g": g_s,
        "adv_z_d": d_z,
        "adv_img_d": d_img,
        "pred_fit": dc.cross_entropy_logits(fit_logits, src_bins),
    }


def loss_closure(model: SynthesisModel, x_np: np.ndarray, src_bins, noise: StepNoise):
    """Pure closure over the current parameters, for finite-difference checks."""

    def closure() -> dict[str, dc.Tensor]:
        return compute_loss_terms(model, x_np, src_bins, noise)

    return closure


# Which loss terms own which parameter group's gradients.  The adversarial
# terms seen from the other group stop gradients on purpose, so a finite
# difference of those pairs would disagree with reverse mode by design.
GRADCHECK_SCOPE = {
    "gen": ("rec", "cyc", "age", "adv_z_g", "adv_img_t_g", "adv_img_s_g"),
    "adv": ("adv_z_d", "adv_img_d"),
    "pred": ("pred_fit",),
}


def train_step(state: TrainState, batch, cfg: TrainConfig) -> LossReport:
    """One optimisation step on a batch of (channel stacks, source bins, sexes)."""
    started = time.perf_counter()
    model = state.model
    w = cfg.weights
    x_np, src_bins, sexes = batch
    noise = sample_step_noise(
        state.rng, src_bins, sexes, cfg.bins.n_bins, cfg.sigma, model.cfg.n_z
    )
    terms = compute_loss_terms(model, x_np, src_bins, noise)
    gen_total, disc_total, report = total_loss(terms, w, step=state.step + 1)

    # adversary update first (skipped entirely with zero adversarial weights)
    if w.l3 > 0 or w.l4 > 0:
        model.adv_store.zero_grads()
        disc_total.backward()
        dc.adam_step(model.adv_store, cfg.lr, weight_decay=cfg.weight_decay)
        model.adv_store.zero_grads()

    # generator group, plus the predictor's own supervised fit in joint mode
    gen_active = any(v > 0 for v in w.as_tuple())
    fit_pred = cfg.p_mode == "joint"
    objective = gen_total if gen_active else None
    if fit_pred:
        objective = (
            terms["pred_fit"]
            if objective is None
            else dc.add(objective, terms["pred_fit"])
        )
    if objective is not None:
        model.gen_store.zero_grads()
        model.pred_store.zero_grads()
        objective.backward()
        if gen_active:
            dc.adam_step(model.gen_store, cfg.lr, weight_decay=cfg.weight_decay)
        if fit_pred:
            dc.adam_step(model.pred_store, cfg.lr, weight_decay=cfg.weight_decay)
        model.gen_store.zero_grads()
        model.pred_store.zero_grads()

    state.step += 1
    return timed_report(report, started, cfg.deterministic)


def _pretrain_predictor(state: TrainState, data: TrainingData, cfg: TrainConfig) -> None:
    model = state.model
    n = len(data.source_bins)
    for _ in range(cfg.p_pretrain_steps):
        idx = state.rng.integers(0, n, size=cfg.batch_size)
        x = dc.Tensor(np.ascontiguousarray(data.x[idx], dtype=model.np_dtype))
        logits = model.predictor.forward(x)
        loss = dc.cross_entropy_logits(logits, data.source_bins[idx])
        model.pred_store.zero_grads()
        loss.backward()
        dc.adam_step(model.pred_store, cfg.lr, weight_decay=cfg.weight_decay)
        model.pred_store.zero_grads()


def train(cfg: TrainConfig, resume: str | None = None) -> TrainResult:
    """Run the full training loop; returns the final state and artefact paths."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = load_manifest(cfg.manifest)
    data = load_training_data(manifest, cfg.bins)

    if resume is not None:
        model, step, rng = load_checkpoint(resume, cfg.model)
        state = TrainState(model=model, rng=rng, step=step)
    else:
        seq = np.random.SeedSequence(cfg.seed).spawn(2)
        state = TrainState(
            model=SynthesisModel(cfg.model, seed=seq[0]),
            rng=np.random.default_rng(seq[1]),
            step=0,
        )
        if cfg.p_mode == "pretrained":
            _pretrain_predictor(state, data, cfg)

    log_path = os.path.join(cfg.out_dir, "train_log.csv")
    final_path = os.path.join(cfg.out_dir, "checkpoint_final.ckpt")
    n = len(data.source_bins)
    last_report = None
    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8", newline="\n") as log:
        while state.step < cfg.steps:
            idx = state.rng.integers(0, n, size=cfg.batch_size)
            batch = (data.x[idx], data.source_bins[idx], [data.sexes[i] for i in idx])
            last_report = train_step(state, batch, cfg)
            log.write(last_report.to_line() + "\n")
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(
                    os.path.join(cfg.out_dir, f"checkpoint_step{state.step:06d}.ckpt"),
                    state.model,
                    state.step,
                    state.rng,
                )
    save_checkpoint(final_path, state.model, state.step, state.rng)
    return TrainResult(
        state=state,
        log_path=log_path,
        checkpoint_path=final_path,
        last_report=last_report,
    )


# ---------------------------------------------------------------------------
# Checkpoints: text manifest (name, dtype, shape) then raw little-endian blobs
# ---------------------------------------------------------------------------


def _state_items(model: SynthesisModel):
    for gname, store in model.stores.items():
        for pname, p in store.items():
            yield f"{gname}/{pname}", p.tensor.data
            yield f"{gname}/{pname}#m", p.m
            yield f"{gname}/{pname}#v", p.v


def save_checkpoint(path, model: SynthesisModel, step: int, rng: np.random.Generator) -> None:
    """Serialise parameters, optimizer moments, step counts and rng state."""
    adam_counts = " ".join(
        f"{name}={store.step_count}" for name, store in model.stores.items()
    )
    lines = [
        CHECKPOINT_MAGIC,
        f"step {step}",
        f"adam {adam_counts}",
        "rng " + json.dumps(rng.bit_generator.state, sort_keys=True),
    ]
    blobs = []
    for name, arr in _state_items(model):
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {shape}")
        blobs.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\nEND\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob.tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, model_cfg: ModelConfig) -> tuple[SynthesisModel, int, np.random.Generator]:
    """Rebuild a model from a checkpoint, verifying shapes against the config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"not a checkpoint file: {path}")
    header = raw[:end].decode("utf-8").splitlines()
    payload = raw[end + len(b"\nEND\n") :]

    step = None
    adam_counts: dict[str, int] = {}
    rng_state = None
    entries: list[tuple[str, str, tuple[int, ...]]] = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "step":
            step = int(rest)
        elif kind == "adam":
            for part in rest.split():
                k, v = part.split("=")
                adam_counts[k] = int(v)
        elif kind == "rng":
            rng_state = json.loads(rest)
        elif kind == "tensor":
            name, dtype, shape = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            entries.append((name, dtype, dims))
        else:
            raise CheckpointError(f"unknown checkpoint field {kind!r}")
    if step is None or rng_state is None:
        raise CheckpointError("checkpoint misses step or rng state")

    model = SynthesisModel(model_cfg, seed=0)
    expected = dict(_state_items(model))
    seen = set()
    offset = 0
    for name, dtype, dims in entries:
        if name not in expected:
            raise CheckpointError(f"checkpoint tensor {name!r} not in this config")
        target = expected[name]
        if tuple(target.shape) != dims:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {dims}, config {tuple(target.shape)}"
            )
        if target.dtype.name != dtype:
            raise CheckpointError(
                f"dtype mismatch for {name!r}: checkpoint {dtype}, config {target.dtype.name}"
            )
        nbytes = int(np.prod(dims, dtype=np.int64)) * target.dtype.itemsize if dims else target.dtype.itemsize
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"checkpoint payload truncated at {name!r}")
        offset += nbytes
        arr = np.frombuffer(chunk, dtype=target.dtype.newbyteorder("<")).reshape(dims)
        target[...] = arr
        seen.add(name)
    if offset != len(payload):
        raise CheckpointError("checkpoint payload has trailing bytes")
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint misses tensors: {sorted(missing)[:3]}...")

    for gname, store in model.stores.items():
        store.step_count = adam_counts.get(gname, 0)
    if rng_state.get("bit_generator") != "PCG64":
        raise CheckpointError("unsupported rng bit generator in checkpoint")
    bit_gen = np.random.PCG64()
    bit_gen.state = rng_state
    return model, step, np.random.Generator(bit_gen)
