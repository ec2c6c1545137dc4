"""Clinical measures, segmentation distances, and evaluation protocols.

Measures follow the usual conventions: cavity/myocardium volumes are voxel
counts times voxel volume (reported in mL), myocardial mass converts the ED
myocardium volume at 1.05 g/mL.  Surface distances operate on boundary voxel
centres in millimetres and are exact (no approximation beyond the surface
discretisation itself).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import AgeBins, age_vector, bin_age, sex_vector
from .manifest import DatasetManifest, ManifestRecord
from .voxelgrid import (
    FOREGROUND_LABELS,
    LV_MYO,
    LV_POOL,
    RV_POOL,
    AnatomyPair,
    LabelVolume,
    boundary_surface,
)

MYOCARDIUM_DENSITY_G_PER_ML = 1.05

MEASURE_NAMES = ("LVM", "LVEDV", "LVESV", "RVEDV", "RVESV")


@dataclass(frozen=True)
class MeasureSet:
    """The five clinical scalars: LVM in grams, the four volumes in mL."""

    lvm: float
    lvedv: float
    lvesv: float
    rvedv: float
    rvesv: float

    def as_dict(self) -> dict[str, float]:
        return {
            "LVM": self.lvm,
            "LVEDV": self.lvedv,
            "LVESV": self.lvesv,
            "RVEDV": self.rvedv,
            "RVESV": self.rvesv,
        }

    def __getitem__(self, name: str) -> float:
        return self.as_dict()[name]


def clinical_measures(pair: AnatomyPair) -> MeasureSet:
    """Derive the five clinical measures from an ED/ES label-volume pair."""
    vox_ml = pair.ed.voxel_volume_mm3 / 1000.0
    return MeasureSet(
        lvm=pair.ed.count(LV_MYO) * vox_ml * MYOCARDIUM_DENSITY_G_PER_ML,
        lvedv=pair.ed.count(LV_POOL) * vox_ml,
        lvesv=pair.es.count(LV_POOL) * vox_ml,
        rvedv=pair.ed.count(RV_POOL) * vox_ml,
        rvesv=pair.es.count(RV_POOL) * vox_ml,
    )


def dice(a: LabelVolume, b: LabelVolume, classes=None) -> float:
    """Mean Dice over the given classes (default: all non-background).

    Classes absent from both volumes are skipped; NaN if every class is
    skipped.
    """
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    if classes is None:
        classes = range(1, max(a.n_labels, b.n_labels))
    scores = []
    for c in classes:
        in_a = a.labels == c
        in_b = b.labels == c
        na = int(in_a.sum())
        nb = int(in_b.sum())
        if na == 0 and nb == 0:
            continue
        scores.append(2.0 * int((in_a & in_b).sum()) / (na + nb))
    return float(np.mean(scores)) if scores else float("nan")


def _min_surface_distances(pa: np.ndarray, pb: np.ndarray, chunk: int = 1024):
    """For each point the distance to the nearest point of the other set."""
    min_a = np.full(len(pa), np.inf)
    min_b = np.full(len(pb), np.inf)
    for start in range(0, len(pa), chunk):
        block = pa[start : start + chunk]
        d2 = ((block[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
        min_a[start : start + chunk] = d2.min(axis=1)
        np.minimum(min_b, d2.min(axis=0), out=min_b)
    return np.sqrt(min_a), np.sqrt(min_b)


def _surfaces(a: LabelVolume, b: LabelVolume, foreground):
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    sa = boundary_surface(a, foreground).points
    sb = boundary_surface(b, foreground).points
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError("undefined distance: empty foreground surface")
    return sa, sb


def hausdorff(a: LabelVolume, b: LabelVolume, foreground=FOREGROUND_LABELS) -> float:
    """Symmetric Hausdorff distance (mm) between foreground boundary surfaces."""
    sa, sb = _surfaces(a, b, foreground)
    min_a, min_b = _min_surface_distances(sa, sb)
    return float(max(min_a.max(), min_b.max()))


def assd(a: LabelVolume, b: LabelVolume, foreground=FOREGROUND_LABELS) -> float:
    """Average symmetric surface distance (mm) between foreground boundaries."""
    sa, sb = _surfaces(a, b, foreground)
    min_a, min_b = _min_surface_distances(sa, sb)
    return float((min_a.sum() + min_b.sum()) / (len(sa) + len(sb)))


def difference_map(a: LabelVolume, b: LabelVolume) -> LabelVolume:
    """Binary volume marking voxels whose labels differ."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    return LabelVolume(
        labels=(a.labels != b.labels).astype(np.uint8),
        spacing=a.spacing,
        n_labels=2,
    )


# ---------------------------------------------------------------------------
# Distribution similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin histogram with normalised mass."""

    edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if len(edges) != len(mass) + 1:
            raise ValueError("edges must have len(mass)+1 entries")
        total = mass.sum()
        if mass.size and abs(total - 1.0) > 1e-9:
            raise ValueError(f"histogram mass sums to {total}, expected 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "mass", mass)

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])


def shared_edges(values_a, values_b, n_bins: int = 50) -> np.ndarray:
    """Uniform bin edges over the pooled min-max of both samples."""
    pooled = np.concatenate([np.asarray(values_a), np.asarray(values_b)])
    lo = float(pooled.min())
    hi = float(pooled.max())
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    return np.linspace(lo, hi, n_bins + 1)


def build_histogram(values, edges: np.ndarray) -> Histogram:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot build a histogram from an empty sample")
    return Histogram(edges=edges, mass=counts / total)


def kl_divergence(p: Histogram, q: Histogram, smoothing: float = 1e-6) -> float:
    """KL(p||q) with additive smoothing then renormalisation of both sides."""
    if not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms must share bin edges")
    ps = p.mass + smoothing
    ps = ps / ps.sum()
    qs = q.mass + smoothing
    qs = qs / qs.sum()
    return float(np.sum(ps * np.log(ps / qs)))


def wasserstein_1d(p: Histogram, q: Histogram) -> float:
    """1D Wasserstein-1 distance via CDF differences, in measure units."""
    if not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms must share bin edges")
    cdf_p = np.cumsum(p.mass)
    cdf_q = np.cumsum(q.mass)
    return float(np.sum(np.abs(cdf_p - cdf_q)) * p.bin_width)


def distribution_similarity(
    synth_by_bin: dict[int, dict[str, list[float]]],
    real_by_bin: dict[int, dict[str, list[float]]],
    n_bins: int,
    n_hist_bins: int = 50,
    smoothing: float = 1e-6,
):
    """Average per-age-bin KL/WD between synthetic and real measure samples.

    Bins missing on either side are reported as gaps and excluded from the
    averages.  Returns ({measure: kl}, {measure: wd}, n_gap_bins).
    """
    kl_out: dict[str, float] = {}
    wd_out: dict[str, float] = {}
    gaps = 0
    for name in MEASURE_NAMES:
        kls, wds = [], []
        for b in range(n_bins):
            synth = synth_by_bin.get(b, {}).get(name, [])
            real = real_by_bin.get(b, {}).get(name, [])
            if not synth or not real:
                gaps += 1
                continue
            edges = shared_edges(synth, real, n_hist_bins)
            hp = build_histogram(synth, edges)
            hq = build_histogram(real, edges)
            kls.append(kl_divergence(hp, hq, smoothing))
            wds.append(wasserstein_1d(hp, hq))
        kl_out[name] = float(np.mean(kls)) if kls else float("nan")
        wd_out[name] = float(np.mean(wds)) if wds else float("nan")
    return kl_out, wd_out, gaps // len(MEASURE_NAMES)


@dataclass(frozen=True)
class DistributionTable:
    kl: dict[str, float]
    wd: dict[str, float]
    gap_bins: int

    def to_csv(self) -> str:
        header = ",".join(f"{m}_KL,{m}_WD" for m in MEASURE_NAMES)
        row = ",".join(
            f"{self.kl[m]:.6f},{self.wd[m]:.6f}" for m in MEASURE_NAMES
        )
        return header + "\n" + row + "\n"


def _measures_by_bin(records, pairs, bins: AgeBins):
    out: dict[int, dict[str, list[float]]] = {}
    for record, pair in zip(records, pairs):
        b = bin_age(record.age, bins)
        dest = out.setdefault(b, {m: [] for m in MEASURE_NAMES})
        for name, value in clinical_measures(pair).as_dict().items():
            dest[name].append(value)
    return out


def eval_distribution(
    model,
    test_manifest: DatasetManifest,
    bins: AgeBins,
    n_hist_bins: int = 50,
    smoothing: float = 1e-6,
    batch_size: int = 16,
    real_vs_real: bool = False,
) -> DistributionTable:
    """Distribution similarity of synthetic vs real clinical measures.

    Every test subject is synthesised at each age bin; synthetic and real
    measures are pooled per bin and compared with KL/WD, averaged over bins.
    ``real_vs_real`` short-circuits synthesis and compares the real data with
    itself (sanity mode: all statistics should be ~0).
    """
    records = list(test_manifest.split("test")) or list(test_manifest.records)
    pairs = [test_manifest.load_pair(r) for r in records]
    real_by_bin = _measures_by_bin(records, pairs, bins)
    if real_vs_real:
        kl, wd, gaps = distribution_similarity(
            real_by_bin, real_by_bin, bins.n_bins, n_hist_bins, smoothing
        )
        return DistributionTable(kl=kl, wd=wd, gap_bins=gaps)

    from .model import channels_to_pair, pair_to_channels

    x = np.stack([pair_to_channels(p) for p in pairs])
    spacing = pairs[0].ed.spacing
    synth_by_bin: dict[int, dict[str, list[float]]] = {}
    for b in range(bins.n_bins):
        dest = synth_by_bin.setdefault(b, {m: [] for m in MEASURE_NAMES})
        for start in range(0, len(records), batch_size):
            stop = min(start + batch_size, len(records))
            cond = np.stack(
                [
                    np.concatenate(
                        [
                            age_vector(b, bins.n_bins, 0.0, None),
                            sex_vector(records[i].sex),
                        ]
                    )
                    for i in range(start, stop)
                ]
            )
            y = model.generate_batch(x[start:stop], cond)
            for row in y:
                pair = channels_to_pair(row, spacing)
                for name, value in clinical_measures(pair).as_dict().items():
                    dest[name].append(value)
    kl, wd, gaps = distribution_similarity(
        synth_by_bin, real_by_bin, bins.n_bins, n_hist_bins, smoothing
    )
    return DistributionTable(kl=kl, wd=wd, gap_bins=gaps)


# ---------------------------------------------------------------------------
# Longitudinal prediction protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LongitudinalRow:
    method: str
    frame: str
    dice_mean: float
    dice_std: float
    hd_mean: float
    hd_std: float
    assd_mean: float
    assd_std: float


@dataclass(frozen=True)
class LongitudinalTable:
    rows: tuple[LongitudinalRow, ...]

    def row(self, method: str, frame: str) -> LongitudinalRow:
        for r in self.rows:
            if r.method == method and r.frame == frame:
                return r
        raise KeyError((method, frame))

    def to_csv(self) -> str:
        lines = ["method,frame,dice_mean,dice_std,hd_mean,hd_std,assd_mean,assd_std"]
        for r in self.rows:
            lines.append(
                f"{r.method},{r.frame},{r.dice_mean:.4f},{r.dice_std:.4f},"
                f"{r.hd_mean:.4f},{r.hd_std:.4f},{r.assd_mean:.4f},{r.assd_std:.4f}"
            )
        return "\n".join(lines) + "\n"


def _frame_stats(scores: dict[str, list[float]]) -> tuple[float, ...]:
    return tuple(
        float(f(scores[k]))
        for k in ("dice", "hd", "assd")
        for f in (np.mean, np.std)
    )


def eval_longitudinal(
    model,
    base_manifest: DatasetManifest,
    longitudinal_manifest: DatasetManifest,
    bins: AgeBins,
    batch_size: int = 16,
) -> LongitudinalTable:
    """Predict each subject's second visit from the first and score it.

    The prediction synthesises the visit-1 anatomy at the visit-2 age and is
    compared to the visit-2 ground truth (Dice averaged over structures, HD
    and ASSD on the whole-heart foreground), per frame.  An identity baseline
    (copying visit 1) is reported alongside.  Revisit ages that fall outside
    the binning range condition on the nearest bin.
    """

    def clamped_bin(age: float) -> int:
        return bin_age(min(max(age, bins.edges[0]), bins.edges[-1]), bins)

    from .model import channels_to_pair, pair_to_channels

    by_id = {r.subject_id: r for r in base_manifest.records}
    matched = [
        (by_id[r.subject_id], r)
        for r in longitudinal_manifest.records
        if r.subject_id in by_id
    ]
    if not matched:
        raise ValueError("no longitudinal records match the base manifest ids")

    scores: dict[tuple[str, str], dict[str, list[float]]] = {
        (m, f): {"dice": [], "hd": [], "assd": []}
        for m in ("model", "identity")
        for f in ("ed", "es")
    }
    for start in range(0, len(matched), batch_size):
        block = matched[start : start + batch_size]
        v1_pairs = [base_manifest.load_pair(r1) for r1, _ in block]
        v2_pairs = [longitudinal_manifest.load_pair(r2) for _, r2 in block]
        x = np.stack([pair_to_channels(p) for p in v1_pairs])
        cond = np.stack(
            [
                np.concatenate(
                    [
                        age_vector(clamped_bin(r2.age), bins.n_bins, 0.0, None),
                        sex_vector(r2.sex),
                    ]
                )
                for _, r2 in block
            ]
        )
        y = model.generate_batch(x, cond)
        for (r1, r2), v1, v2, row in zip(block, v1_pairs, v2_pairs, y):
            pred = channels_to_pair(row, v1.ed.spacing)
            for frame in ("ed", "es"):
                truth = getattr(v2, frame)
                for method, vol in (
                    ("model", getattr(pred, frame)),
                    ("identity", getattr(v1, frame)),
                ):
                    rec = scores[(method, frame)]
                    rec["dice"].append(dice(truth, vol))
                    rec["hd"].append(hausdorff(truth, vol))
                    rec["assd"].append(assd(truth, vol))

    rows = tuple(
        LongitudinalRow(method, frame, *_frame_stats(scores[(method, frame)]))
        for method in ("model", "identity")
        for frame in ("ed", "es")
    )
    return LongitudinalTable(rows=rows)


# ---------------------------------------------------------------------------
# Age-sweep synthesis protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    """Synthesis of one subject at every age bin."""

    pairs: tuple[AnatomyPair, ...]  # one per bin, hardened
    measures: tuple[MeasureSet, ...]
    bins: AgeBins

    def measures_csv(self) -> str:
        lines = ["age_bin,bin_centre," + ",".join(MEASURE_NAMES)]
        for i, ms in enumerate(self.measures):
            vals = ",".join(f"{ms[m]:.4f}" for m in MEASURE_NAMES)
            lines.append(f"{i},{self.bins.centre(i):.1f},{vals}")
        return "\n".join(lines) + "\n"


def synthesis_sweep(model, pair: AnatomyPair, sex: str, bins: AgeBins) -> SweepResult:
    """Synthesise one anatomy at every age bin and derive its measures."""
    from .model import channels_to_pair, pair_to_channels

    x = np.repeat(pair_to_channels(pair)[None], bins.n_bins, axis=0)
    cond = np.stack(
        [
            np.concatenate(
                [age_vector(b, bins.n_bins, 0.0, None), sex_vector(sex)]
            )
            for b in range(bins.n_bins)
        ]
    )
    y = model.generate_batch(x, cond)
    pairs = tuple(channels_to_pair(row, pair.ed.spacing) for row in y)
    measures = tuple(clinical_measures(p) for p in pairs)
    return SweepResult(pairs=pairs, measures=measures, bins=bins)
