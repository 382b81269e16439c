"""Goodness-of-fit indicators for predicted water depths.

MAE, RMSE, Nash-Sutcliffe efficiency and Kling-Gupta efficiency over paired
observed/simulated series, plus the per-return-period breakdown. KGE uses
alpha = std(sim)/std(obs) (variability ratio) and beta = mean(sim)/mean(obs)
(bias ratio); a constant simulation has r := 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

METRIC_NAMES = ("MAE", "RMSE", "NSE", "KGE")


class MetricError(ValueError):
    """Degenerate input for a metric (empty, non-finite, constant or zero-mean observations)."""


@dataclass(frozen=True)
class PairedSeries:
    obs: np.ndarray
    sim: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float64).ravel()
        sim = np.asarray(self.sim, dtype=np.float64).ravel()
        if obs.shape != sim.shape:
            raise MetricError(f"length mismatch: {obs.size} observed vs {sim.size} simulated")
        if obs.size == 0:
            raise MetricError("empty series")
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(sim))):
            raise MetricError("non-finite values in series")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "sim", sim)

    @property
    def n(self) -> int:
        return self.obs.size

    @classmethod
    def from_masked(cls, obs, sim, mask=None) -> "PairedSeries":
        obs, sim = np.asarray(obs, dtype=np.float64), np.asarray(sim, dtype=np.float64)
        if mask is None:
            return cls(obs, sim)
        mask = np.asarray(mask, dtype=bool)
        return cls(obs[mask], sim[mask])


class KGE(NamedTuple):
    kge: float
    r: float
    alpha: float
    beta: float


def _series(s, sim=None) -> PairedSeries:
    if isinstance(s, PairedSeries):
        return s
    return PairedSeries(s, sim)


def mae(s, sim=None) -> float:
    s = _series(s, sim)
    return float(np.mean(np.abs(s.obs - s.sim)))


def rmse(s, sim=None) -> float:
    s = _series(s, sim)
    d = s.obs - s.sim
    # scale by the largest deviation so tiny or huge values do not under/overflow when squared
    top = float(np.max(np.abs(d)))
    if top == 0.0:
        return 0.0
    d = d / top
    return top * float(math.sqrt(np.mean(d * d)))


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def nse(s, sim=None) -> float:
    s = _series(s, sim)
    if _is_constant(s.obs):
        raise MetricError("NSE undefined: observations have zero variance")
    d = s.obs - s.sim
    c = s.obs - s.obs.mean()
    return float(1.0 - np.sum(d * d) / np.sum(c * c))


def _mean_std(x: np.ndarray) -> tuple[float, float]:
    # a constant array has exactly its value as mean and exactly zero spread
    if _is_constant(x):
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std())


def kge(s, sim=None) -> KGE:
    s = _series(s, sim)
    if _is_constant(s.obs):
        raise MetricError("KGE undefined: observations have zero variance")
    mo, so = _mean_std(s.obs)
    ms, ss = _mean_std(s.sim)
    if mo == 0.0:
        raise MetricError("KGE undefined: observed mean is zero")
    if ss == 0.0:
        r = 0.0
    else:
        co, cs = s.obs - mo, s.sim - ms
        r = float(np.sum(co * cs) / math.sqrt(np.sum(co * co) * np.sum(cs * cs)))
    alpha = ss / so
    beta = ms / mo
    value = 1.0 - math.sqrt((r - 1.0) ** 2 + (alpha - 1.0) ** 2 + (beta - 1.0) ** 2)
    return KGE(value, r, alpha, beta)


def kge_from_components(r: float, alpha: float, beta: float) -> float:
    return 1.0 - math.sqrt((r - 1.0) ** 2 + (alpha - 1.0) ** 2 + (beta - 1.0) ** 2)


def all_metrics(s, sim=None) -> dict[str, float]:
    s = _series(s, sim)
    return {"MAE": mae(s), "RMSE": rmse(s), "NSE": nse(s), "KGE": kge(s).kge}


def pooled(obs_maps: Sequence[np.ndarray], sim_maps: Sequence[np.ndarray],
           masks: Sequence[np.ndarray] | None = None) -> PairedSeries:
    """Concatenate the valid pixels of several events into one series."""
    if masks is None:
        masks = [None] * len(obs_maps)
    obs, sim = [], []
    for o, p, m in zip(obs_maps, sim_maps, masks):
        o, p = np.asarray(o, dtype=np.float64), np.asarray(p, dtype=np.float64)
        if o.shape != p.shape:
            raise MetricError(f"map shape mismatch {o.shape} vs {p.shape}")
        sel = np.ones(o.shape, bool) if m is None else np.asarray(m, dtype=bool)
        obs.append(o[sel])
        sim.append(p[sel])
    if not obs:
        raise MetricError("no events to pool")
    return PairedSeries(np.concatenate(obs), np.concatenate(sim))


@dataclass
class ReturnPeriodRow:
    return_period: float
    rmse: float
    nse: float
    n_events: int
    n_pixels: int


def per_return_period(return_periods: Sequence[float], obs_maps, sim_maps, masks=None,
                      scatter_dir: str | Path | None = None) -> list[ReturnPeriodRow]:
    """RMSE and NSE over the pooled pixels of each distinct return period.

    Args:
        return_periods: tag per event.
        obs_maps, sim_maps: per-event depth maps.
        masks: optional per-event validity masks.
        scatter_dir: if given, one ``scatter_T<T>.csv`` with (obs, sim) rows per period.

    Returns:
        Rows sorted by return period. NSE is NaN for a period whose pooled
        observations are constant.
    """
    if masks is None:
        masks = [None] * len(obs_maps)
    groups: dict[float, list[int]] = {}
    for i, t in enumerate(return_periods):
        groups.setdefault(float(t), []).append(i)
    rows = []
    for t in sorted(groups):
        idx = groups[t]
        s = pooled([obs_maps[i] for i in idx], [sim_maps[i] for i in idx], [masks[i] for i in idx])
        try:
            e = nse(s)
        except MetricError:
            e = float("nan")
        rows.append(ReturnPeriodRow(t, rmse(s), e, len(idx), s.n))
        if scatter_dir is not None:
            path = Path(scatter_dir) / f"scatter_T{t:g}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["obs", "sim"])
                w.writerows(zip(map(repr, s.obs.tolist()), map(repr, s.sim.tolist())))
    return rows


def write_return_period_csv(rows: Sequence[ReturnPeriodRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["return_period", "RMSE", "NSE", "n_events", "n_pixels"])
        for r in rows:
            w.writerow([f"{r.return_period:.6g}", repr(float(r.rmse)), repr(float(r.nse)),
                        r.n_events, r.n_pixels])
