"""Figure rendering for reports: training curves, age sweeps, evaluation bars.

Every report-producing CLI command writes a PNG next to its delimited output.
"""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .losses import ALL_TERMS  # noqa: E402
from .metrics import (  # noqa: E402
    MEASURE_NAMES,
    DistributionTable,
    LongitudinalTable,
    SweepResult,
    difference_map,
)
from .voxelgrid import AnatomyPair  # noqa: E402

_LABEL_CMAP = matplotlib.colors.ListedColormap(
    ["black", "#d62728", "#ff9896", "#1f77b4"]
)


def save_training_curves(log_path: str, out_png: str) -> None:
    """Two-panel loss curves (generator terms / adversary terms) from a log."""
    data = np.loadtxt(log_path, delimiter=",", ndmin=2)
    steps = data[:, 0]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for i, name in enumerate(ALL_TERMS):
        ax = axes[0] if i < 6 else axes[1]
        ax.plot(steps, data[:, 1 + i], label=name, lw=0.8)
    axes[0].set_title("generator terms")
    axes[1].set_title("adversary terms")
    for ax in axes:
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def save_sweep_trends(sweep: SweepResult, out_png: str) -> None:
    """Clinical-measure trajectories across target age bins."""
    centres = [sweep.bins.centre(i) for i in range(sweep.bins.n_bins)]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in MEASURE_NAMES:
        ax.plot(centres, [ms[name] for ms in sweep.measures], marker="o", label=name)
    ax.set_xlabel("target age (years)")
    ax.set_ylabel("measure (mL; LVM in g)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def _mid_slice(volume) -> np.ndarray:
    return volume.labels[:, :, volume.dims[2] // 2].T


def save_sweep_slices(sweep: SweepResult, source: AnatomyPair, out_png: str) -> None:
    """Mid-slice panel: synthesised frames per bin plus difference maps vs the
    youngest bin."""
    n = sweep.bins.n_bins
    youngest = sweep.pairs[0]
    fig, axes = plt.subplots(4, n, figsize=(1.6 * n, 6.6))
    row_titles = ("ED", "ED diff", "ES", "ES diff")
    for j, pair in enumerate(sweep.pairs):
        panels = (
            (pair.ed, _LABEL_CMAP, 3),
            (difference_map(pair.ed, youngest.ed), "gray", 1),
            (pair.es, _LABEL_CMAP, 3),
            (difference_map(pair.es, youngest.es), "gray", 1),
        )
        for i, (vol, cmap, vmax) in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(_mid_slice(vol), cmap=cmap, vmin=0, vmax=vmax, origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"{sweep.bins.centre(j):.0f} y", fontsize=8)
            if j == 0:
                ax.set_ylabel(row_titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def save_distribution_bars(table: DistributionTable, out_png: str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.arange(len(MEASURE_NAMES))
    axes[0].bar(x, [table.kl[m] for m in MEASURE_NAMES], color="#1f77b4")
    axes[0].set_title("KL divergence")
    axes[1].bar(x, [table.wd[m] for m in MEASURE_NAMES], color="#ff7f0e")
    axes[1].set_title("Wasserstein distance")
    for ax in axes:
        ax.set_xticks(x, MEASURE_NAMES, rotation=30, fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def save_longitudinal_bars(table: LongitudinalTable, out_png: str) -> None:
    metrics = ("dice", "hd", "assd")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    groups = [("model", "ed"), ("model", "es"), ("identity", "ed"), ("identity", "es")]
    x = np.arange(len(groups))
    for ax, metric in zip(axes, metrics):
        means = [getattr(table.row(m, f), f"{metric}_mean") for m, f in groups]
        stds = [getattr(table.row(m, f), f"{metric}_std") for m, f in groups]
        ax.bar(x, means, yerr=stds, capsize=3)
        ax.set_title(metric.upper() if metric != "dice" else "Dice")
        ax.set_xticks(x, [f"{m}\n{f.upper()}" for m, f in groups], fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
