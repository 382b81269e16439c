"""Metric values against exact rational evaluation, plus algebraic properties."""

import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodfusion import metrics
from floodfusion.metrics import MetricError, PairedSeries, kge, mae, nse, rmse


def exact_nse(obs, sim):
    obs = [Fraction(v) for v in obs]
    sim = [Fraction(v) for v in sim]
    mean = sum(obs) / len(obs)
    return 1 - sum((o - s) ** 2 for o, s in zip(obs, sim)) / sum((o - mean) ** 2 for o in obs)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


class TestHandValues:
    def test_mae(self):
        assert rel(mae([0, 1, 2], [1, 1, 1]), 2 / 3) < 1e-12

    def test_rmse(self):
        assert rel(rmse([0, 0], [3, 4]), math.sqrt(12.5)) < 1e-12

    def test_nse(self):
        assert float(exact_nse([1, 2, 3], [3, 2, 1])) == -3
        assert rel(nse([1, 2, 3], [3, 2, 1]), -3.0) < 1e-12

    def test_kge_of_mean_benchmark(self):
        obs = np.array([0.3, 1.1, 2.7, 0.05, 4.0])
        res = kge(obs, np.full(obs.size, obs.mean()))
        assert res.r == 0.0 and res.alpha == 0.0 and res.beta == 1.0
        assert res.kge == 1 - math.sqrt(2)

    def test_kge_of_doubled_obs(self):
        obs = np.array([1.0, 2.0, 4.0, 7.0])
        res = kge(obs, 2 * obs)
        assert rel(res.r, 1.0) < 1e-12
        assert rel(res.alpha, 2.0) < 1e-12
        assert rel(res.beta, 2.0) < 1e-12
        assert rel(res.kge, 1 - math.sqrt(2)) < 1e-12

    def test_perfect(self):
        obs = np.array([0.5, 1.5, 3.0])
        assert mae(obs, obs) == 0.0 and rmse(obs, obs) == 0.0
        assert nse(obs, obs) == 1.0
        assert tuple(kge(obs, obs)) == (1.0, 1.0, 1.0, 1.0)

    def test_nse_of_mean_is_exactly_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            obs = rng.gamma(2.0, 1.0, 37)
            assert nse(obs, np.full(obs.size, obs.mean())) == 0.0


class TestErrors:
    def test_constant_obs(self):
        with pytest.raises(MetricError):
            nse([1, 1, 1], [0, 1, 2])
        with pytest.raises(MetricError):
            kge([2, 2], [1, 3])

    def test_zero_mean_obs(self):
        with pytest.raises(MetricError):
            kge([-1.0, 1.0], [0.0, 1.0])

    def test_bad_series(self):
        with pytest.raises(MetricError):
            PairedSeries([1, 2], [1])
        with pytest.raises(MetricError):
            PairedSeries([], [])
        with pytest.raises(MetricError):
            PairedSeries([1, np.nan], [1, 2])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@st.composite
def paired(draw, min_size=2):
    n = draw(st.integers(min_size, 40))
    obs = draw(arrays(np.float64, n, elements=finite))
    sim = draw(arrays(np.float64, n, elements=finite))
    return obs, sim


class TestProperties:
    @given(paired())
    @settings(max_examples=200, deadline=None)
    def test_mae_le_rmse(self, s):
        obs, sim = s
        assert mae(obs, sim) <= rmse(obs, sim) * (1 + 1e-12) + 1e-300

    @given(paired(), st.floats(-50, 50, allow_nan=False))
    @settings(max_examples=100, deadline=None)
    def test_mae_homogeneous(self, s, c):
        obs, sim = s
        assert math.isclose(mae(c * obs, c * sim), abs(c) * mae(obs, sim), rel_tol=1e-9, abs_tol=1e-9)

    @given(paired(min_size=3), st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariance(self, s, rnd):
        obs, sim = s
        obs = obs + 1e-3 * np.arange(obs.size)  # not constant
        if abs(obs.mean()) < 1e-6:
            obs = obs + 1.0
        perm = list(range(obs.size))
        rnd.shuffle(perm)
        a = metrics.all_metrics(obs, sim)
        b = metrics.all_metrics(obs[perm], sim[perm])
        for k in metrics.METRIC_NAMES:
            assert math.isclose(a[k], b[k], rel_tol=1e-9, abs_tol=1e-9)

    @given(paired(min_size=3))
    @settings(max_examples=200, deadline=None)
    def test_kge_component_identity(self, s):
        obs, sim = s
        obs = obs + np.arange(obs.size)
        if abs(obs.mean()) < 1e-3:
            obs = obs + 1.0
        res = kge(obs, sim)
        assert abs(metrics.kge_from_components(res.r, res.alpha, res.beta) - res.kge) <= 1e-12 * max(1, abs(res.kge))

    @given(paired(min_size=3))
    @settings(max_examples=100, deadline=None)
    def test_nse_matches_rational(self, s):
        obs, sim = s
        obs = obs + np.arange(obs.size)
        ref = float(exact_nse(obs, sim))
        assert math.isclose(nse(obs, sim), ref, rel_tol=1e-9, abs_tol=1e-9)

    @given(paired(min_size=2))
    @settings(max_examples=100, deadline=None)
    def test_nse_at_most_one(self, s):
        obs, sim = s
        obs = obs + np.arange(obs.size)
        assert nse(obs, sim) <= 1.0


class TestPooling:
    def test_pooled_respects_masks(self):
        o = [np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]])]
        p = [x + 1 for x in o]
        m = [np.array([[True, False], [True, True]]), np.ones((2, 2), bool)]
        s = metrics.pooled(o, p, m)
        assert s.n == 7
        assert mae(s) == 1.0

    def test_per_return_period(self, tmp_path):
        rng = np.random.default_rng(0)
        obs = [rng.random((4, 4)) for _ in range(6)]
        sim = [o + rng.normal(0, 0.1 * (i + 1), o.shape) for i, o in enumerate(obs)]
        tags = [2, 2, 10, 10, 50, 50]
        rows = metrics.per_return_period(tags, obs, sim, scatter_dir=tmp_path)
        assert [r.return_period for r in rows] == [2.0, 10.0, 50.0]
        assert all(r.n_events == 2 and r.n_pixels == 32 for r in rows)
        overall = rmse(metrics.pooled(obs, sim))
        assert min(r.rmse for r in rows) <= overall <= max(r.rmse for r in rows)
        with open(tmp_path / "scatter_T10.csv") as fh:
            data = list(csv.reader(fh))
        assert data[0] == ["obs", "sim"] and len(data) == 33
        assert float(data[1][0]) == obs[2].ravel()[0]

    def test_perfect_single_period(self):
        o = np.array([[0.1, 0.4], [0.2, 0.9]])
        (row,) = metrics.per_return_period([5], [o], [o])
        assert (row.return_period, row.rmse, row.nse) == (5.0, 0.0, 1.0)

    def test_csv_header(self, tmp_path):
        rows = metrics.per_return_period([2], [np.arange(4.0)], [np.arange(4.0) + 1])
        metrics.write_return_period_csv(rows, tmp_path / "rp.csv")
        lines = (tmp_path / "rp.csv").read_text().splitlines()
        assert lines[0] == "return_period,RMSE,NSE,n_events,n_pixels"
        assert lines[1].startswith("2,1.0,")
