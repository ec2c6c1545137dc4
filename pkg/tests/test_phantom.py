import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from cardiosynth.manifest import load_manifest
from cardiosynth.metrics import clinical_measures
from cardiosynth.phantom import (
    PhantomConfig,
    analytic_measures,
    frame_geometry,
    generate_dataset,
    render_anatomy,
    render_pair,
    sample_subject,
    sphere_overlap_volume,
)
from cardiosynth.voxelgrid import LV_MYO, LV_POOL, RV_POOL


MM_GRID = PhantomConfig(dims=(64, 48, 32), spacing=(1.0, 1.0, 1.0), centre_shift=(-8, 0, 0))


def subject(cfg=MM_GRID, seed=0, **overrides):
    spec = sample_subject(cfg, np.random.default_rng(seed), "s0000")
    if overrides:
        from dataclasses import replace

        spec = replace(spec, **overrides)
    return spec


def zero_jitter(spec):
    from dataclasses import replace

    return replace(spec, lv_jitter=(0.0, 0.0, 0.0), epi_jitter=(0.0, 0.0, 0.0), rv_jitter=0.0)


class TestSampling:
    def test_deterministic_for_fixed_seed(self):
        a = sample_subject(MM_GRID, np.random.default_rng(7), "x")
        b = sample_subject(MM_GRID, np.random.default_rng(7), "x")
        assert a == b

    def test_sex_ratio(self):
        rng = np.random.default_rng(0)
        sexes = [sample_subject(MM_GRID, rng, f"s{i}").sex for i in range(10_000)]
        ratio = sexes.count("M") / len(sexes)
        assert 0.47 <= ratio <= 0.53

    def test_ages_within_range(self):
        rng = np.random.default_rng(1)
        lo, hi = MM_GRID.age_range
        for i in range(200):
            assert lo <= sample_subject(MM_GRID, rng, f"s{i}").age <= hi

    def test_zero_jitter_same_demographics_render_identically(self):
        cfg = PhantomConfig(dims=(32, 32, 16), jitter_mm=0.0, rv_jitter_rel=0.0)
        s1 = zero_jitter(subject(cfg, seed=1, age=60.0, sex="F", ef=0.55))
        s2 = zero_jitter(subject(cfg, seed=2, age=60.0, sex="F", ef=0.55))
        assert render_anatomy(s1, "ed", cfg) == render_anatomy(s2, "ed", cfg)


class TestGeometry:
    def test_zero_slope_makes_age_irrelevant(self):
        cfg = PhantomConfig(
            dims=(32, 32, 16),
            lv_volume_slope=0.0,
            epi_volume_slope=0.0,
            rv_volume_slope=0.0,
        )
        s = zero_jitter(subject(cfg, sex="F", ef=0.5))
        from dataclasses import replace

        young = replace(s, age=45.0)
        old = replace(s, age=80.0)
        assert render_anatomy(young, "ed", cfg) == render_anatomy(old, "ed", cfg)
        assert render_anatomy(young, "es", cfg) == render_anatomy(old, "es", cfg)

    def test_inverted_shell_raises(self):
        cfg = PhantomConfig(lv_axes=(14.0, 14.0, 11.0), epi_axes=(15.0, 15.0, 12.0), jitter_mm=0.0)
        s = subject(cfg, lv_jitter=(2.0, 0.0, 0.0), epi_jitter=(0.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="inverted shell"):
            frame_geometry(s, "ed", cfg)

    def test_rv_vanishing_raises(self):
        cfg = PhantomConfig(rv_scale=0.2, rv_offset=0.3)
        with pytest.raises(ValueError, match="inside the LV shell"):
            frame_geometry(subject(cfg), "ed", cfg)


class TestLensFormula:
    def test_against_quadrature(self):
        # intersection volume by integrating circular cross sections
        def overlap_quad(r1, r2, d):
            def area(x):
                a1 = r1 * r1 - x * x
                a2 = r2 * r2 - (x - d) ** 2
                return math.pi * max(0.0, min(a1, a2))

            lo, hi = -r1, r1 + d
            val, _ = quad(area, lo, hi, limit=200)
            return val

        for r1, r2, d in [(1.0, 0.8, 1.1), (1.0, 0.4, 0.9), (2.0, 1.5, 1.0), (1.0, 1.0, 0.5)]:
            assert sphere_overlap_volume(r1, r2, d) == pytest.approx(
                overlap_quad(r1, r2, d), rel=1e-6
            )

    def test_disjoint_and_contained(self):
        assert sphere_overlap_volume(1.0, 0.5, 2.0) == 0.0
        assert sphere_overlap_volume(1.0, 0.3, 0.1) == pytest.approx(4 / 3 * math.pi * 0.027)


class TestAnalyticMeasures:
    def test_lv_volume_formula(self):
        cfg = PhantomConfig(
            dims=(96, 96, 96),
            spacing=(1.0, 1.0, 1.0),
            lv_axes=(20.0, 20.0, 30.0),
            epi_axes=(24.0, 24.0, 34.0),
            jitter_mm=0.0,
            rv_jitter_rel=0.0,
            centre_shift=(-10, 0, 0),
        )
        s = zero_jitter(subject(cfg, age=45.0, sex="F"))
        ms = analytic_measures(s, cfg)
        assert ms.lvedv == pytest.approx(4 / 3 * math.pi * 20 * 20 * 30 / 1000, rel=1e-12)
        assert ms.lvedv == pytest.approx(50.265, abs=0.01)

    def test_ef_scaling_rule(self):
        s = subject(ef=0.6)
        ms = analytic_measures(s, MM_GRID)
        assert ms.lvesv == pytest.approx(0.4 * ms.lvedv, rel=1e-12)
        assert ms.rvesv == pytest.approx(0.4 * ms.rvedv, rel=1e-12)

    def test_mass_is_shell_volume_times_density(self):
        # construct a shell of exactly 120 mL -> 126 g
        target = 120_000.0 * 3 / (4 * math.pi)  # prod(epi) - prod(lv)
        lv = (20.0, 20.0, 30.0)
        epi_z = (np.prod(lv) + target) / (24.0 * 24.0)
        cfg = PhantomConfig(
            dims=(96, 96, 96),
            spacing=(1.0, 1.0, 1.0),
            lv_axes=lv,
            epi_axes=(24.0, 24.0, float(epi_z)),
            jitter_mm=0.0,
        )
        s = zero_jitter(subject(cfg, age=45.0, sex="F"))
        assert analytic_measures(s, cfg).lvm == pytest.approx(126.0, rel=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(
        slope=st.floats(-0.08, -0.01),
        seed=st.integers(0, 1000),
    )
    def test_lvedv_strictly_decreasing_in_age(self, slope, seed):
        cfg = PhantomConfig(lv_volume_slope=slope, jitter_mm=0.0, rv_jitter_rel=0.0)
        s = zero_jitter(subject(cfg, seed=seed))
        from dataclasses import replace

        ages = np.linspace(*cfg.age_range, 12)
        vols = [analytic_measures(replace(s, age=float(a)), cfg).lvedv for a in ages]
        assert all(b < a for a, b in zip(vols, vols[1:]))


class TestRasterization:
    def test_lv_cavity_volume_within_2pct(self):
        cfg = PhantomConfig(
            dims=(96, 96, 96),
            spacing=(1.0, 1.0, 1.0),
            lv_axes=(20.0, 20.0, 30.0),
            epi_axes=(24.0, 24.0, 34.0),
            jitter_mm=0.0,
            centre_shift=(-10, 0, 0),
        )
        s = zero_jitter(subject(cfg, age=45.0, sex="F"))
        v = render_anatomy(s, "ed", cfg)
        count_ml = v.count(LV_POOL) * v.voxel_volume_mm3 / 1000
        assert count_ml == pytest.approx(4 / 3 * math.pi * 20 * 20 * 30 / 1000, rel=0.02)

    def test_es_to_ed_cavity_ratio(self):
        s = subject(MM_GRID, seed=3)
        ed = render_anatomy(s, "ed", MM_GRID)
        es = render_anatomy(s, "es", MM_GRID)
        for label in (LV_POOL, RV_POOL):
            ratio = es.count(label) / ed.count(label)
            assert ratio == pytest.approx(1.0 - s.ef, abs=0.03)

    def test_measures_match_analytic(self):
        rng = np.random.default_rng(5)
        for i in range(10):
            s = sample_subject(MM_GRID, rng, f"s{i}")
            got = clinical_measures(render_pair(s, MM_GRID)).as_dict()
            want = analytic_measures(s, MM_GRID).as_dict()
            for key in got:
                assert got[key] == pytest.approx(want[key], rel=0.02), key

    def test_label_nesting_with_thick_shell(self):
        cfg = PhantomConfig(dims=(64, 48, 32), spacing=(1.0, 1.0, 1.0),
                            jitter_mm=0.0, rv_jitter_rel=0.0, centre_shift=(-8, 0, 0))
        rng = np.random.default_rng(6)
        for i in range(5):
            s = zero_jitter(sample_subject(cfg, rng, f"s{i}"))
            v = render_anatomy(s, "ed", cfg)
            cavity = v.labels == LV_POOL
            myo = v.labels == LV_MYO
            padded_myo = np.pad(myo | cavity, 1)
            for axis, shift in [(a, s_) for a in range(3) for s_ in (-1, 1)]:
                neighbour = np.roll(padded_myo, shift, axis=axis)[1:-1, 1:-1, 1:-1]
                assert not np.any(cavity & ~neighbour)


class TestDataset:
    def test_counts_and_files(self, tmp_path):
        cfg = PhantomConfig(seed=9)
        ds = generate_dataset(cfg, 8, 2, tmp_path)
        assert len(ds.manifest.records) == 10
        vols = list((tmp_path / "vols").iterdir())
        # 10 subjects * 2 frames + 2 longitudinal revisits * 2 frames
        assert len(vols) == 24
        assert len(ds.longitudinal.records) == 2

    def test_deterministic_bytes(self, tmp_path):
        cfg = PhantomConfig(seed=4)
        d1 = generate_dataset(cfg, 4, 2, tmp_path / "a")
        d2 = generate_dataset(cfg, 4, 2, tmp_path / "b")
        for r1, r2 in zip(d1.manifest.records, d2.manifest.records):
            b1 = (tmp_path / "a" / r1.ed_path).read_bytes()
            b2 = (tmp_path / "b" / r2.ed_path).read_bytes()
            assert b1 == b2
        m1 = (tmp_path / "a" / "manifest.csv").read_text()
        m2 = (tmp_path / "b" / "manifest.csv").read_text()
        assert m1 == m2

    def test_longitudinal_ages_are_base_plus_gap(self, tmp_path):
        cfg = PhantomConfig(seed=5)
        ds = generate_dataset(cfg, 2, 3, tmp_path)
        base = {r.subject_id: r.age for r in ds.manifest.split("test")}
        for rec in ds.longitudinal.records:
            assert rec.age == pytest.approx(base[rec.subject_id] + 3.2, abs=1e-9)

    def test_manifest_round_trip(self, tmp_path):
        cfg = PhantomConfig(seed=6)
        ds = generate_dataset(cfg, 3, 1, tmp_path)
        loaded = load_manifest(ds.manifest_path)
        assert [r.subject_id for r in loaded.records] == [
            r.subject_id for r in ds.manifest.records
        ]
        pair = loaded.load_pair(loaded.records[0])
        assert pair.ed.dims == cfg.dims
