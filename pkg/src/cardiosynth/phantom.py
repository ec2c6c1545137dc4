"""Procedural phantom population of ageing hearts with known measures.

Each subject is a nested-ellipsoid heart: an LV blood pool inside an
epicardial ellipsoid (the gap is myocardium), plus an RV blood pool shaped as
a crescent: an ellipsoid, geometrically similar to the epicardial one and
offset along +x, minus its overlap with the epicardial ellipsoid.  Keeping
the RV similar to the epicardium makes the overlap an affine image of a
two-sphere lens, so every clinical measure has a closed form and rendered
voxel counts can be validated against exact volumes.

Size laws: per-structure fractional volume slopes per decade of age (applied
to semi-axes through a cube root), a linear scale factor for male subjects,
per-axis millimetre jitter for the LV pool and epicardium, and a relative
scalar jitter for the RV.  The ES frame shrinks both cavities to
``(1 - EF)`` times their ED volume; the epicardial surface is unchanged, so
the ES wall is thicker.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .manifest import DatasetManifest, ManifestRecord, save_manifest
from .metrics import MeasureSet, MYOCARDIUM_DENSITY_G_PER_ML
from .voxelgrid import LabelVolume, write_vxl

ED = "ed"
ES = "es"


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.8, 1.8, 2.0)
    # semi-axes (mm) at the reference age, female
    lv_axes: tuple[float, float, float] = (11.0, 11.0, 8.0)
    epi_axes: tuple[float, float, float] = (15.0, 15.0, 12.0)
    rv_scale: float = 0.8        # RV semi-axes relative to the epicardium
    rv_offset: float = 1.1       # RV centre offset, in units of the epi x semi-axis
    # fractional volume change per decade of age, per structure
    lv_volume_slope: float = -0.05
    epi_volume_slope: float = -0.005  # keeps the wall growing ~+2%/decade
    rv_volume_slope: float = -0.05
    sex_scale_male: float = 1.08
    ef_mean: float = 0.55
    ef_std: float = 0.04
    jitter_mm: float = 0.08      # per-axis jitter of LV pool and epicardium
    rv_jitter_rel: float = 0.008
    age_range: tuple[float, float] = (44.6, 82.3)
    reference_age: float = 45.0
    centre_shift: tuple[float, float, float] = (-7.0, 0.0, 0.0)
    longitudinal_gap_years: float = 3.2
    seed: int = 0

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("grid dims must be >= 1")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be > 0")
        if any(a <= 0 for a in self.lv_axes + self.epi_axes):
            raise ValueError("semi-axes must be > 0")
        if not 0.0 < self.ef_mean < 1.0:
            raise ValueError("ejection fraction mean must be in (0, 1)")
        if self.sex_scale_male <= 0 or self.rv_scale <= 0:
            raise ValueError("scale factors must be > 0")


@dataclass(frozen=True)
class SubjectSpec:
    """One phantom subject; jitter and EF are frozen so repeat visits only differ in age."""

    subject_id: str
    age: float
    sex: str
    lv_jitter: tuple[float, float, float]
    epi_jitter: tuple[float, float, float]
    rv_jitter: float
    ef: float


def sample_subject(
    cfg: PhantomConfig, rng: np.random.Generator, subject_id: str = "s0000"
) -> SubjectSpec:
    """Draw one subject: uniform age, fair-coin sex, Gaussian shape jitter."""
    lo, hi = cfg.age_range
    age = float(np.round(rng.uniform(lo, hi), 1))
    sex = "M" if rng.random() < 0.5 else "F"
    lv_jitter = tuple(rng.normal(0.0, cfg.jitter_mm, size=3))
    epi_jitter = tuple(rng.normal(0.0, cfg.jitter_mm, size=3))
    rv_jitter = float(rng.normal(0.0, cfg.rv_jitter_rel))
    ef = float(np.clip(rng.normal(cfg.ef_mean, cfg.ef_std), 0.2, 0.8))
    return SubjectSpec(
        subject_id=subject_id,
        age=age,
        sex=sex,
        lv_jitter=lv_jitter,
        epi_jitter=epi_jitter,
        rv_jitter=rv_jitter,
        ef=ef,
    )


def sphere_overlap_volume(r1: float, r2: float, d: float) -> float:
    """Volume of the intersection of two spheres with radii r1, r2 at distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return (4.0 / 3.0) * math.pi * min(r1, r2) ** 3
    return (
        math.pi
        * (r1 + r2 - d) ** 2
        * (d * d + 2 * d * r2 - 3 * r2 * r2 + 2 * d * r1 + 6 * r1 * r2 - 3 * r1 * r1)
        / (12.0 * d)
    )


def _crescent_unit_volume(rho: float, delta: float) -> float:
    """RV crescent volume in the space where the epicardium is the unit sphere."""
    return (4.0 / 3.0) * math.pi * rho**3 - sphere_overlap_volume(1.0, rho, delta)


@dataclass(frozen=True)
class FrameGeometry:
    """Ellipsoid semi-axes (mm) and centres (mm) of one cardiac frame."""

    lv_axes: np.ndarray
    epi_axes: np.ndarray
    rv_rho: float  # RV semi-axes are rv_rho * epi_axes
    lv_centre: np.ndarray
    rv_centre: np.ndarray


def _grid_centre(cfg: PhantomConfig) -> np.ndarray:
    dims = np.asarray(cfg.dims, dtype=np.float64)
    spacing = np.asarray(cfg.spacing, dtype=np.float64)
    return (dims - 1.0) * spacing / 2.0 + np.asarray(cfg.centre_shift)


def frame_geometry(spec: SubjectSpec, frame: str, cfg: PhantomConfig) -> FrameGeometry:
    """Resolve the subject's ellipsoid layout for the ED or ES frame."""
    decades = (spec.age - cfg.reference_age) / 10.0
    sex_scale = cfg.sex_scale_male if spec.sex == "M" else 1.0
    factors = {}
    for name, slope in (
        ("lv", cfg.lv_volume_slope),
        ("epi", cfg.epi_volume_slope),
        ("rv", cfg.rv_volume_slope),
    ):
        vf = 1.0 + slope * decades
        if vf <= 0:
            raise ValueError(f"age {spec.age} collapses the {name} volume")
        factors[name] = vf

    lv = (
        np.asarray(cfg.lv_axes) * sex_scale * factors["lv"] ** (1.0 / 3.0)
        + np.asarray(spec.lv_jitter)
    )
    epi = (
        np.asarray(cfg.epi_axes) * sex_scale * factors["epi"] ** (1.0 / 3.0)
        + np.asarray(spec.epi_jitter)
    )
    if np.any(lv <= 0) or np.any(epi <= 0):
        raise ValueError("jitter collapsed a semi-axis")
    if np.any(lv >= epi):
        raise ValueError("inverted shell: LV pool exceeds the epicardial ellipsoid")
    rho = (
        cfg.rv_scale
        * (factors["rv"] / factors["epi"]) ** (1.0 / 3.0)
        * (1.0 + spec.rv_jitter)
    )
    if _crescent_unit_volume(rho, cfg.rv_offset) <= 0:
        raise ValueError("RV cavity entirely inside the LV shell")

    if frame == ES:
        cavity_scale = (1.0 - spec.ef) ** (1.0 / 3.0)
        lv = lv * cavity_scale
        rho = _es_rv_rho(rho, cfg.rv_offset, spec.ef)
    elif frame != ED:
        raise ValueError(f"frame must be '{ED}' or '{ES}', got {frame!r}")

    centre = _grid_centre(cfg)
    rv_centre = centre + np.array([cfg.rv_offset * epi[0], 0.0, 0.0])
    return FrameGeometry(
        lv_axes=lv, epi_axes=epi, rv_rho=rho, lv_centre=centre, rv_centre=rv_centre
    )


def _es_rv_rho(rho_ed: float, delta: float, ef: float) -> float:
    """RV size at ES such that the crescent volume is (1-EF) times the ED volume."""
    target = (1.0 - ef) * _crescent_unit_volume(rho_ed, delta)

    def gap(rho):
        return _crescent_unit_volume(rho, delta) - target

    return float(brentq(gap, 1e-9, rho_ed, xtol=1e-13, rtol=8.9e-16))


def render_anatomy(spec: SubjectSpec, frame: str, cfg: PhantomConfig) -> LabelVolume:
    """Rasterise the subject on the configured grid.

    A voxel takes the label of the innermost region containing its centre,
    with precedence LV pool > myocardium > RV pool > background; this clips
    the RV ellipsoid against the LV shell.
    """
    geo = frame_geometry(spec, frame, cfg)
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    x = (np.arange(nx) * sx)[:, None, None]
    y = (np.arange(ny) * sy)[None, :, None]
    z = (np.arange(nz) * sz)[None, None, :]

    def inside(centre, axes):
        return (
            ((x - centre[0]) / axes[0]) ** 2
            + ((y - centre[1]) / axes[1]) ** 2
            + ((z - centre[2]) / axes[2]) ** 2
        ) <= 1.0

    labels = np.zeros(cfg.dims, dtype=np.uint8)
    labels[inside(geo.rv_centre, geo.rv_rho * geo.epi_axes)] = 3
    epi_mask = inside(geo.lv_centre, geo.epi_axes)
    labels[epi_mask] = 2
    labels[inside(geo.lv_centre, geo.lv_axes)] = 1
    return LabelVolume(labels=labels, spacing=cfg.spacing)


def render_pair(spec: SubjectSpec, cfg: PhantomConfig):
    from .voxelgrid import AnatomyPair

    return AnatomyPair(
        ed=render_anatomy(spec, ED, cfg), es=render_anatomy(spec, ES, cfg)
    )


def analytic_measures(spec: SubjectSpec, cfg: PhantomConfig) -> MeasureSet:
    """Exact clinical measures of the continuous geometry, before rasterisation."""
    ed = frame_geometry(spec, ED, cfg)
    four_thirds_pi = 4.0 * math.pi / 3.0
    lv_ml = four_thirds_pi * float(np.prod(ed.lv_axes)) / 1000.0
    epi_ml = four_thirds_pi * float(np.prod(ed.epi_axes)) / 1000.0
    rv_ml = (
        _crescent_unit_volume(ed.rv_rho, cfg.rv_offset)
        * float(np.prod(ed.epi_axes))
        / 1000.0
    )
    return MeasureSet(
        lvm=(epi_ml - lv_ml) * MYOCARDIUM_DENSITY_G_PER_ML,
        lvedv=lv_ml,
        lvesv=(1.0 - spec.ef) * lv_ml,
        rvedv=rv_ml,
        rvesv=(1.0 - spec.ef) * rv_ml,
    )


@dataclass(frozen=True)
class PhantomDataset:
    manifest: DatasetManifest
    longitudinal: DatasetManifest
    manifest_path: str
    longitudinal_path: str


def generate_dataset(
    cfg: PhantomConfig, n_train: int, n_test: int, out_dir
) -> PhantomDataset:
    """Write a train/test population plus a longitudinal revisit of the test set.

    Deterministic for a fixed ``cfg.seed``.  Revisits re-render each test
    subject at ``age + longitudinal_gap_years`` with identical jitter, so the
    only change between visits is age.
    """
    out_dir = os.fspath(out_dir)
    vol_dir = os.path.join(out_dir, "vols")
    os.makedirs(vol_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    records = []
    long_records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        spec = sample_subject(cfg, rng, subject_id=f"s{i:04d}")
        paths = {}
        for frame in (ED, ES):
            rel = os.path.join("vols", f"{spec.subject_id}_{frame}.vxl")
            write_vxl(render_anatomy(spec, frame, cfg), os.path.join(out_dir, rel))
            paths[frame] = rel
        records.append(
            ManifestRecord(
                subject_id=spec.subject_id,
                age=spec.age,
                sex=spec.sex,
                ed_path=paths[ED],
                es_path=paths[ES],
                split=split,
            )
        )
        if split == "test":
            revisit = replace(spec, age=spec.age + cfg.longitudinal_gap_years)
            paths2 = {}
            for frame in (ED, ES):
                rel = os.path.join("vols", f"{spec.subject_id}_v2_{frame}.vxl")
                write_vxl(
                    render_anatomy(revisit, frame, cfg), os.path.join(out_dir, rel)
                )
                paths2[frame] = rel
            long_records.append(
                ManifestRecord(
                    subject_id=spec.subject_id,
                    age=revisit.age,
                    sex=revisit.sex,
                    ed_path=paths2[ED],
                    es_path=paths2[ES],
                    split="test",
                )
            )

    manifest = DatasetManifest(records=tuple(records), root=out_dir)
    longitudinal = DatasetManifest(records=tuple(long_records), root=out_dir)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    longitudinal_path = os.path.join(out_dir, "manifest_longitudinal.csv")
    save_manifest(manifest, manifest_path)
    save_manifest(longitudinal, longitudinal_path)
    return PhantomDataset(
        manifest=manifest,
        longitudinal=longitudinal,
        manifest_path=manifest_path,
        longitudinal_path=longitudinal_path,
    )
