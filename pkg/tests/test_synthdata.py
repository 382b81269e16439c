"""Design storms, world generation, the flood oracle and dataset persistence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from floodfusion.raster import FEATURE_IDS, Grid
from floodfusion.synthdata import (DURATIONS, DatasetError, Hyetograph, StormParams, build_dataset,
                                   build_routing, design_storm, event_set, flood_oracle, gen_world,
                                   level_pool, load_dataset, mass_balance_error, save_dataset)
from floodfusion.terrain import LandUse, fill_sinks_sdepth, pipe_raster


def chicago_rate(t, T, D, p):
    """Instantaneous Chicago intensity (mm/min) with the peak at exactly r * D."""
    a, b, n, r = p.scale(T), p.b, p.n, p.r
    tp = r * D
    u = (tp - t) / r if t < tp else (t - tp) / (1 - r)
    return a * ((1 - n) * u + b) / (u + b) ** (n + 1)


class TestStorms:
    def test_params_validated(self):
        with pytest.raises(ValueError):
            StormParams(A1=0)
        with pytest.raises(ValueError):
            StormParams(n=2.0)
        with pytest.raises(ValueError):
            StormParams(r=1.0)

    def test_bad_duration_and_period(self):
        with pytest.raises(ValueError):
            design_storm(10, 125)
        with pytest.raises(ValueError):
            design_storm(0.5, 120)

    @pytest.mark.parametrize("T", [2, 10, 37.5, 100])
    @pytest.mark.parametrize("D", DURATIONS)
    def test_total_matches_quadrature(self, T, D):
        p = StormParams()
        h = design_storm(T, D, p)
        tp = p.r * D
        integral = (quad(chicago_rate, 0, tp, args=(T, D, p), epsabs=0, epsrel=1e-13)[0]
                    + quad(chicago_rate, tp, D, args=(T, D, p), epsabs=0, epsrel=1e-13)[0])
        assert h.total == pytest.approx(integral, rel=1e-9)
        assert h.total == pytest.approx(D * p.intensity(D, T), rel=1e-9)

    @pytest.mark.parametrize("D", DURATIONS)
    def test_peak_position(self, D):
        p = StormParams()
        h = design_storm(25, D, p)
        k = round(p.r * (h.steps - 1))
        assert int(np.argmax(h.intensities)) == k
        assert h.steps == D // p.step

    @given(st.floats(1, 500), st.floats(1, 500), st.sampled_from(DURATIONS))
    @settings(max_examples=50, deadline=None)
    def test_total_increases_with_return_period(self, t1, t2, d):
        if t1 == t2:
            return
        lo, hi = sorted((t1, t2))
        assert design_storm(lo, d).total < design_storm(hi, d).total

    def test_event_set(self):
        ev = event_set()
        assert len(ev) == 90
        periods = {h.return_period for h in ev}
        assert len(periods) == 30 and min(periods) == 2 and max(periods) == 100
        assert {h.duration for h in ev} == {120, 240, 360}
        logs = np.log(sorted(periods))
        np.testing.assert_allclose(np.diff(logs), np.diff(logs)[0], rtol=1e-9)

    def test_default_coefficients(self):
        p = StormParams()
        assert (p.A1, p.C, p.b, p.n, p.r, p.step) == (10.0, 0.8, 10.0, 0.7, 0.4, 10)
        # 2-year, 2-hour storm: 10 * (1 + 0.8 log10 2) * 120 / 130^0.7
        assert design_storm(2, 120).total == pytest.approx(49.3322681206798, rel=1e-12)

    def test_hyetograph_validation(self):
        with pytest.raises(ValueError):
            Hyetograph(2.0, 30, 10, np.ones(2))
        with pytest.raises(ValueError):
            Hyetograph(2.0, 20, 10, np.array([1.0, -1.0]))


class TestWorld:
    def test_seeded(self):
        a, b = gen_world(3, 16, 32), gen_world(3, 16, 32)
        assert a[0] == b[0]
        assert a[1].impervious_fraction == b[1].impervious_fraction
        assert a[2] == b[2]
        assert not gen_world(4, 16, 32)[0] == a[0]

    @pytest.mark.parametrize("seed", range(5))
    def test_construction_guarantees(self, seed):
        dem, land, pipes = gen_world(seed, 32, 32)
        _, sd = fill_sinks_sdepth(dem)
        assert np.count_nonzero(sd.values > 0) >= 3
        assert dem.values[0].mean() > dem.values[-1].mean()
        imp = np.unique(land.impervious_fraction.values)
        assert set(imp) <= {0.0, 0.3, 0.6, 0.9}
        assert len(pipes.segments) > 0

    def test_bad_size(self):
        with pytest.raises(ValueError):
            gen_world(0, 24, 16)


def bowl():
    z = np.full((5, 5), 1.0)
    z[1:4, 1:4] = 0.5
    z[2, 2] = 0.0
    dem = Grid(z, cell_size=2.0)
    land = LandUse(dem.with_values(np.ones((5, 5))), np.zeros((5, 5), int))
    return dem, land


class TestOracle:
    def test_zero_rain(self):
        dem, land, pipes = gen_world(0, 16, 16)
        truth = flood_oracle(dem, land, pipes, Hyetograph(2.0, 30, 10, np.zeros(3)))
        assert not truth.depth_series.any()

    def test_bowl_half_full(self):
        dem, land = bowl()
        area = dem.cell_area
        V = fill_sinks_sdepth(dem)[1].values.sum() * area
        assert V == pytest.approx(5 * area)
        # only rain on the 3x3 interior reaches the bowl
        mm = (V / 2) / (9 * area) * 1000
        truth = flood_oracle(dem, land, np.zeros(25), Hyetograph(2.0, 10, 10, np.array([mm])))
        ponded = truth.depth_series[-1].sum() * area
        assert ponded == pytest.approx(V / 2, rel=1e-9)
        assert truth.max_depth[0].sum() == 0 and truth.max_depth[:, 0].sum() == 0
        assert mass_balance_error(truth) < 1e-12

    def test_bowl_overflow_spills(self):
        dem, land = bowl()
        truth = flood_oracle(dem, land, np.zeros(25), Hyetograph(2.0, 20, 10, np.array([2000.0, 2000.0])))
        np.testing.assert_allclose(truth.depth_series[-1].sum() * dem.cell_area, 5 * dem.cell_area,
                                   rtol=1e-12)
        assert truth.budget["outflow"] > 0
        assert mass_balance_error(truth) < 1e-12

    def test_level_pool(self):
        z = np.array([0.0, 1.0, 1.0, 3.0])
        d = level_pool(z, 4.0, 1.0)
        assert d.sum() == pytest.approx(4.0)
        np.testing.assert_allclose(d, [2.0, 1.0, 1.0, 0.0])
        assert not level_pool(z, 0.0, 1.0).any()

    @pytest.mark.parametrize("seed", range(3))
    def test_invariants(self, seed):
        dem, land, pipes = gen_world(seed, 32, 32)
        truth = flood_oracle(dem, land, pipes, design_storm(50, 120))
        assert np.all(truth.depth_series >= 0)
        np.testing.assert_array_equal(truth.maxH.values, truth.depth_series.max(axis=0))
        _, sd = fill_sinks_sdepth(dem)
        assert not truth.max_depth[sd.values == 0].any()
        assert mass_balance_error(truth) < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_more_pipes_never_raise_depth(self, seed):
        dem, land, pipes = gen_world(seed, 32, 32)
        pv = pipe_raster(pipes, dem).values
        routing = build_routing(dem)
        storm = design_storm(100, 240)
        a = flood_oracle(dem, land, pv, storm, routing).max_depth
        b = flood_oracle(dem, land, 2 * pv, storm, routing).max_depth
        assert np.all(b <= a)
        assert b.sum() < a.sum() or a.sum() == 0

    def test_depth_monotone_in_return_period(self):
        dem, land, pipes = gen_world(1, 32, 32)
        routing = build_routing(dem)
        pv = pipe_raster(pipes, dem)
        sums = [flood_oracle(dem, land, pv, design_storm(T, 120), routing).max_depth.sum()
                for T in (2, 5, 10, 25, 50, 100)]
        assert all(x <= y for x, y in zip(sums, sums[1:]))
        assert sums[-1] > sums[0]

    def test_geometry_mismatch(self):
        dem, land, pipes = gen_world(0, 16, 16)
        other = LandUse(Grid(np.zeros((16, 32))), np.zeros((16, 32), int))
        with pytest.raises(ValueError):
            flood_oracle(dem, other, pipes, design_storm(2, 120))


@pytest.fixture(scope="module")
def small_ds():
    storms = [design_storm(T, 120) for T in (2, 100)] + [design_storm(10, 240)]
    return build_dataset(7, rows=16, cols=16, events=storms)


class TestDataset:
    def test_full_event_grid(self):
        ds = build_dataset(0, rows=16, cols=16)
        assert len(ds) == 90
        assert ds.features.feature_ids == FEATURE_IDS
        assert max(mass_balance_error(e.truth) for e in ds.events) < 1e-9

    def test_regeneration_identical(self, small_ds):
        again = build_dataset(7, rows=16, cols=16, events=[e.rain for e in small_ds.events])
        for a, b in zip(small_ds.events, again.events):
            np.testing.assert_array_equal(a.truth.depth_series, b.truth.depth_series)
        for fid in FEATURE_IDS:
            assert small_ds.features[fid] == again.features[fid]

    def test_round_trip(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.seed == 7 and len(back) == 3
        assert back.dem == small_ds.dem
        for a, b in zip(small_ds.events, back.events):
            np.testing.assert_array_equal(a.rain.intensities, b.rain.intensities)
            np.testing.assert_array_equal(a.truth.depth_series, b.truth.depth_series)
            assert a.rain.return_period == b.rain.return_period
        for fid in FEATURE_IDS:
            assert back.features[fid] == small_ds.features[fid]

    def test_tamper_detected(self, small_ds, tmp_path):
        root = save_dataset(small_ds, tmp_path / "ds")
        p = root / "events" / "001" / "depth_000.asc"
        p.write_text(p.read_text().replace("nodata_value -9999", "nodata_value -9998"))
        with pytest.raises(DatasetError, match="hash"):
            load_dataset(root)
        load_dataset(root, verify=False)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)


def test_runoff_coefficient_uses_retention():
    # flat single cell: everything that runs off leaves the domain
    dem = Grid(np.zeros((1, 1)), cell_size=1.0)
    land = LandUse(dem.with_values([[0.5]]), np.zeros((1, 1), int))
    truth = flood_oracle(dem, land, np.zeros(1), Hyetograph(2.0, 10, 10, np.array([1000.0])))
    b = truth.budget
    assert b["rain"] == pytest.approx(1.0)
    assert b["retained"] == pytest.approx(0.8 * 0.5)
    assert b["outflow"] == pytest.approx(0.5 + 0.2 * 0.5)
    assert math.isclose(b["rain"], b["retained"] + b["outflow"], rel_tol=1e-15)
