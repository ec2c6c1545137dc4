"""Command-line entry points: phantom, train, synthesize, evaluate, gradcheck.

Option precedence is flags > config file (--config, JSON with the same keys)
> built-in defaults; unknown config keys are rejected.  Every command writes
the fully resolved configuration as ``config.json`` next to its outputs.
Relative output directories are placed under ``$CARDIOSYNTH_OUT_ROOT`` when
that variable is set.  Exit codes: 0 success, 1 check/evaluation failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .conditioning import AgeBins
from .losses import LossWeights
from .manifest import load_manifest
from .metrics import eval_distribution, eval_longitudinal, synthesis_sweep
from .model import ModelConfig, SynthesisModel, pair_to_channels
from .phantom import PhantomConfig, generate_dataset
from .trainer import (
    GRADCHECK_SCOPE,
    TrainConfig,
    load_checkpoint,
    loss_closure,
    sample_step_noise,
    train,
)
from .voxelgrid import AnatomyPair, read_vxl, write_vxl

OUT_ROOT_ENV = "CARDIOSYNTH_OUT_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _triple(text) -> tuple:
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) if "." in p else int(p) for p in parts)


def _resolve_options(defaults: dict, args: argparse.Namespace) -> dict:
    """flags > config file > defaults; unknown config-file keys are an error."""
    given = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    resolved.update(given)
    return resolved


def _write_config(out_dir: str, payload: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _find_manifest(data: str) -> str:
    if os.path.isdir(data):
        return os.path.join(data, "manifest.csv")
    return data


def _load_model(ckpt: str, train_config: str | None):
    cfg_path = train_config or os.path.join(os.path.dirname(os.path.abspath(ckpt)), "config.json")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        stored = json.load(fh)
    model_cfg = ModelConfig.from_dict(stored["model"])
    bins = AgeBins(tuple(stored["bins"]))
    model, _, _ = load_checkpoint(ckpt, model_cfg)
    return model, bins


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

_PHANTOM_DEFAULTS = {
    "train": 256,
    "test": 64,
    "seed": 0,
    "dims": (32, 32, 16),
    "spacing": (1.8, 1.8, 2.0),
    "jitter": PhantomConfig.jitter_mm,
    "ef_mean": PhantomConfig.ef_mean,
    "ef_std": PhantomConfig.ef_std,
    "gap": PhantomConfig.longitudinal_gap_years,
}


def cmd_phantom(args: argparse.Namespace) -> int:
    opts = _resolve_options(_PHANTOM_DEFAULTS, args)
    out = _resolve_out(args.out)
    cfg = PhantomConfig(
        dims=tuple(int(d) for d in opts["dims"]),
        spacing=tuple(float(s) for s in opts["spacing"]),
        jitter_mm=float(opts["jitter"]),
        ef_mean=float(opts["ef_mean"]),
        ef_std=float(opts["ef_std"]),
        longitudinal_gap_years=float(opts["gap"]),
        seed=int(opts["seed"]),
    )
    dataset = generate_dataset(cfg, int(opts["train"]), int(opts["test"]), out)
    _write_config(out, {**_plain(opts), "command": "phantom", "out": out})
    print(f"manifest: {dataset.manifest_path}")
    print(f"longitudinal manifest: {dataset.longitudinal_path}")
    return 0


def _plain(opts: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in opts.items()}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "steps": 5000,
    "batch": 4,
    "lr": 2e-4,
    "weight_decay": 1e-5,
    "sigma": 0.02,
    "lambda0": 1.0,
    "lambda1": 0.1,
    "lambda2": 0.01,
    "lambda3": 0.1,
    "lambda4": 1.0,
    "lambda5": 1.0,
    "seed": 0,
    "checkpoint_interval": 1000,
    "deterministic": True,
    "p_mode": "joint",
    "p_pretrain_steps": 400,
}


def cmd_train(args: argparse.Namespace) -> int:
    opts = _resolve_options(_TRAIN_DEFAULTS, args)
    out = _resolve_out(args.out)
    manifest_path = _find_manifest(args.data)
    manifest = load_manifest(manifest_path)
    probe = manifest.load_pair(manifest.records[0])
    bins = AgeBins()
    model_cfg = ModelConfig(grid=probe.ed.dims, n_labels=probe.ed.n_labels, n_age_bins=bins.n_bins)
    weights = LossWeights(
        l0=float(opts["lambda0"]),
        l1=float(opts["lambda1"]),
        l2=float(opts["lambda2"]),
        l3=float(opts["lambda3"]),
        l4=float(opts["lambda4"]),
        l5=float(opts["lambda5"]),
    )
    cfg = TrainConfig(
        manifest=manifest_path,
        out_dir=out,
        steps=int(opts["steps"]),
        batch_size=int(opts["batch"]),
        lr=float(opts["lr"]),
        weight_decay=float(opts["weight_decay"]),
        sigma=float(opts["sigma"]),
        weights=weights,
        seed=int(opts["seed"]),
        checkpoint_interval=int(opts["checkpoint_interval"]),
        deterministic=bool(opts["deterministic"]),
        p_mode=str(opts["p_mode"]),
        p_pretrain_steps=int(opts["p_pretrain_steps"]),
        model=model_cfg,
        bins=bins,
    )
    _write_config(
        out,
        {
            **_plain(opts),
            "command": "train",
            "data": manifest_path,
            "out": out,
            "model": _plain(dataclasses.asdict(model_cfg)),
            "bins": list(bins.edges),
        },
    )
    result = train(cfg, resume=getattr(args, "resume", None))
    from .figures import save_training_curves

    save_training_curves(result.log_path, os.path.join(out, "training_curves.png"))
    print(f"log: {result.log_path}")
    print(f"final checkpoint: {result.checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

_SYNTH_DEFAULTS = {"train_config": None}


def cmd_synthesize(args: argparse.Namespace) -> int:
    opts = _resolve_options(_SYNTH_DEFAULTS, args)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    model, bins = _load_model(args.ckpt, opts["train_config"])
    pair = AnatomyPair(ed=read_vxl(args.ed), es=read_vxl(args.es))
    sweep = synthesis_sweep(model, pair, args.sex, bins)

    from .figures import save_sweep_slices, save_sweep_trends
    from .metrics import difference_map

    youngest = sweep.pairs[0]
    for i, synth in enumerate(sweep.pairs):
        write_vxl(synth.ed, os.path.join(out, f"synth_bin{i}_ed.vxl"))
        write_vxl(synth.es, os.path.join(out, f"synth_bin{i}_es.vxl"))
        write_vxl(difference_map(synth.ed, youngest.ed), os.path.join(out, f"diff_bin{i}_ed.vxl"))
        write_vxl(difference_map(synth.es, youngest.es), os.path.join(out, f"diff_bin{i}_es.vxl"))
    csv_path = os.path.join(out, "sweep_measures.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(sweep.measures_csv())
    save_sweep_trends(sweep, os.path.join(out, "sweep_trends.png"))
    save_sweep_slices(sweep, pair, os.path.join(out, "sweep_slices.png"))
    _write_config(
        out,
        {
            **_plain(opts),
            "command": "synthesize",
            "ckpt": args.ckpt,
            "ed": args.ed,
            "es": args.es,
            "sex": args.sex,
            "out": out,
        },
    )
    print(f"measures: {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

_EVAL_DEFAULTS = {
    "train_config": None,
    "longitudinal": None,
    "hist_bins": 50,
    "real_vs_real": False,
}


def cmd_evaluate(args: argparse.Namespace) -> int:
    opts = _resolve_options(_EVAL_DEFAULTS, args)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    manifest_path = _find_manifest(args.data)
    manifest = load_manifest(manifest_path)
    model, bins = _load_model(args.ckpt, opts["train_config"])

    from .figures import save_distribution_bars, save_longitudinal_bars

    table1 = eval_distribution(
        model,
        manifest,
        bins,
        n_hist_bins=int(opts["hist_bins"]),
        real_vs_real=bool(opts["real_vs_real"]),
    )
    dist_path = os.path.join(out, "distribution.csv")
    with open(dist_path, "w", encoding="utf-8") as fh:
        fh.write(table1.to_csv())
    save_distribution_bars(table1, os.path.join(out, "distribution.png"))
    print(f"distribution table: {dist_path}")
    print("  " + table1.to_csv().splitlines()[0])
    print("  " + table1.to_csv().splitlines()[1])

    long_path = opts["longitudinal"]
    if long_path is None:
        candidate = os.path.join(os.path.dirname(manifest_path), "manifest_longitudinal.csv")
        long_path = candidate if os.path.exists(candidate) else None
    if long_path is None:
        print("warning: no longitudinal manifest found; skipping prediction table")
    else:
        table2 = eval_longitudinal(model, manifest, load_manifest(long_path), bins)
        pred_path = os.path.join(out, "longitudinal.csv")
        with open(pred_path, "w", encoding="utf-8") as fh:
            fh.write(table2.to_csv())
        save_longitudinal_bars(table2, os.path.join(out, "longitudinal.png"))
        print(f"longitudinal table: {pred_path}")

    _write_config(
        out,
        {
            **_plain({**opts, "longitudinal": long_path}),
            "command": "evaluate",
            "ckpt": args.ckpt,
            "data": manifest_path,
            "out": out,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

_GRADCHECK_DEFAULTS = {
    "tolerance": 1e-5,
    "h": 1e-5,
    "seed": 0,
    "batch": 2,
    "max_elements": None,
}


def gradcheck_closure(seed: int = 0, batch: int = 2):
    """Full-objective closure on a random micro batch (float64, 4x4x4 grid)."""
    from . import diffcore as dc

    cfg = ModelConfig.micro()
    model = SynthesisModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n_labels = cfg.n_labels
    x = np.zeros((batch, cfg.in_channels) + cfg.grid, dtype=np.float64)
    for i in range(batch):
        for half in range(2):
            labels = rng.integers(0, n_labels, size=cfg.grid)
            for c in range(n_labels):
                x[i, half * n_labels + c] = labels == c
    src_bins = rng.integers(0, cfg.n_age_bins, size=batch)
    sexes = ["F" if rng.random() < 0.5 else "M" for _ in range(batch)]
    noise = sample_step_noise(rng, src_bins, sexes, cfg.n_age_bins, 0.02, cfg.n_z)
    return loss_closure(model, x, src_bins, noise), model, dc


def cmd_gradcheck(args: argparse.Namespace) -> int:
    opts = _resolve_options(_GRADCHECK_DEFAULTS, args)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    closure, model, dc = gradcheck_closure(int(opts["seed"]), int(opts["batch"]))
    max_elements = opts["max_elements"]
    report = dc.grad_check(
        closure,
        model.stores,
        h=float(opts["h"]),
        tolerance=float(opts["tolerance"]),
        max_elements=None if max_elements is None else int(max_elements),
        scope=GRADCHECK_SCOPE,
    )
    report_path = os.path.join(out, "gradcheck_report.csv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    _write_config(out, {**_plain(opts), "command": "gradcheck", "out": out})
    n_params = len(report.per_param())
    if report.passed():
        print(
            f"all {n_params} parameter groups pass at {opts['tolerance']:g} "
            f"(max rel err {report.max_rel_err:.2e}); report: {report_path}"
        )
        return 0
    for row in report.failures()[:10]:
        print(f"FAIL {row.param} [{row.loss}]: rel err {row.max_rel_err:.2e}")
    print(f"report: {report_path}")
    return 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiosynth",
        description="Conditional generative modelling of ageing cardiac anatomy",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sup = argparse.SUPPRESS

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--train", type=int, default=sup, help="number of training subjects")
    p.add_argument("--test", type=int, default=sup, help="number of test subjects")
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--dims", type=_triple, default=sup, help="grid dims, e.g. 32,32,16")
    p.add_argument("--spacing", type=_triple, default=sup, help="voxel mm, e.g. 1.8,1.8,2.0")
    p.add_argument("--jitter", type=float, default=sup, help="shape jitter std (mm)")
    p.add_argument("--ef-mean", dest="ef_mean", type=float, default=sup)
    p.add_argument("--ef-std", dest="ef_std", type=float, default=sup)
    p.add_argument("--gap", type=float, default=sup, help="longitudinal age gap (years)")
    p.set_defaults(func=cmd_phantom)

    t = sub.add_parser("train", help="train the generative model")
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--steps", type=int, default=sup)
    t.add_argument("--batch", type=int, default=sup)
    t.add_argument("--lr", type=float, default=sup)
    t.add_argument("--weight-decay", dest="weight_decay", type=float, default=sup)
    t.add_argument("--sigma", type=float, default=sup, help="condition noise std")
    for i in range(6):
        t.add_argument(f"--lambda{i}", dest=f"lambda{i}", type=float, default=sup)
    t.add_argument("--seed", type=int, default=sup)
    t.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int, default=sup)
    t.add_argument(
        "--no-deterministic",
        dest="deterministic",
        action="store_false",
        default=sup,
        help="record real wall times in the log (not byte-reproducible)",
    )
    t.add_argument("--p-mode", dest="p_mode", choices=("joint", "pretrained"), default=sup)
    t.add_argument("--p-pretrain-steps", dest="p_pretrain_steps", type=int, default=sup)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="age sweep for one anatomy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ed", required=True, help="source ED volume (.vxl)")
    s.add_argument("--es", required=True, help="source ES volume (.vxl)")
    s.add_argument("--sex", required=True, choices=("F", "M"))
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON config file")
    s.add_argument("--train-config", dest="train_config", default=sup,
                   help="config.json of the training run (default: next to ckpt)")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="distribution + longitudinal evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset directory or manifest path")
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None, help="JSON config file")
    e.add_argument("--train-config", dest="train_config", default=sup)
    e.add_argument("--longitudinal", default=sup, help="longitudinal manifest path")
    e.add_argument("--hist-bins", dest="hist_bins", type=int, default=sup)
    e.add_argument("--real-vs-real", dest="real_vs_real", action="store_true", default=sup)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--out", default="gradcheck")
    g.add_argument("--config", default=None, help="JSON config file")
    g.add_argument("--tolerance", type=float, default=sup)
    g.add_argument("--h", type=float, default=sup)
    g.add_argument("--seed", type=int, default=sup)
    g.add_argument("--batch", type=int, default=sup)
    g.add_argument("--max-elements", dest="max_elements", type=int, default=sup,
                   help="probe at most this many elements per parameter")
    g.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
