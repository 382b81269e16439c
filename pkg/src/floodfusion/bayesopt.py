"""Bayesian optimization over feature-inclusion subsets.

A Gaussian process with kernel ``exp(-lam * hamming(u, v))`` models the
(standardized) objective over 14-bit inclusion vectors; expected improvement
picks the next subset from seeded random candidates plus all one-bit flips of
the incumbent. Each proposal depends only on the seed, the iteration number
and the trials so far, so a run interrupted after k trials and resumed from
its JSON-lines ledger makes exactly the proposals an uninterrupted run would.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .raster import FEATURE_IDS

log = logging.getLogger(__name__)

N_FEATURES = len(FEATURE_IDS)
REPORT_METRICS = ("MAE", "RMSE", "NSE", "KGE")
LOWER_IS_BETTER = {"MAE": True, "RMSE": True, "NSE": False, "KGE": False}
TOP_K = 7


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Subset:
    include: tuple[bool, ...]

    def __post_init__(self):
        inc = tuple(bool(b) for b in self.include)
        if len(inc) != N_FEATURES:
            raise ValueError(f"subset needs {N_FEATURES} flags, got {len(inc)}")
        if not any(inc):
            raise ValueError("subset must include at least one feature")
        object.__setattr__(self, "include", inc)

    @classmethod
    def from_ids(cls, ids: Sequence[str]) -> "Subset":
        unknown = set(ids) - set(FEATURE_IDS)
        if unknown:
            raise ValueError(f"unknown feature ids {sorted(unknown)}")
        return cls(tuple(f in ids for f in FEATURE_IDS))

    @classmethod
    def from_key(cls, key: str) -> "Subset":
        return cls(tuple(ch == "1" for ch in key))

    @property
    def count(self) -> int:
        return sum(self.include)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(f for f, b in zip(FEATURE_IDS, self.include) if b)

    @property
    def key(self) -> str:
        return "".join("1" if b else "0" for b in self.include)

    def bits(self) -> np.ndarray:
        return np.array(self.include, dtype=bool)

    def __contains__(self, fid: str) -> bool:
        return self.include[FEATURE_IDS.index(fid)]


def hamming(u: Subset, v: Subset) -> int:
    return sum(a != b for a, b in zip(u.include, v.include))


def kernel(u: Subset, v: Subset, lam: float = 0.5) -> float:
    if not lam > 0:
        raise ValueError("length-scale must be positive")
    return math.exp(-lam * hamming(u, v))


def kernel_matrix(A: np.ndarray, B: np.ndarray, lam: float) -> np.ndarray:
    """Kernel between rows of two boolean matrices."""
    A, B = A.astype(np.float64), B.astype(np.float64)
    ham = A @ (1 - B).T + (1 - A) @ B.T
    return np.exp(-lam * ham)


class GPSurrogate:
    """Zero-mean GP regression on optionally standardized targets."""

    def __init__(self, lam: float = 0.5, noise: float = 1e-4, standardize: bool = True):
        if not lam > 0 or not noise > 0:
            raise ValueError("length-scale and noise must be positive")
        self.lam, self.noise, self.standardize = lam, noise, standardize
        self.X = None

    def fit(self, X, y) -> "GPSurrogate":
        X = np.asarray([x.bits() if isinstance(x, Subset) else x for x in X], dtype=bool)
        y = np.asarray(y, dtype=np.float64)
        if X.shape[0] < 1 or X.shape[0] != y.size:
            raise ValueError("need at least one (subset, objective) pair")
        if self.standardize:
            self.mu = float(y.mean())
            sd = float(y.std())
            self.sd = sd if sd > 0 else 1.0
        else:
            self.mu, self.sd = 0.0, 1.0
        z = (y - self.mu) / self.sd
        K = kernel_matrix(X, X, self.lam)
        jitter = 0.0
        for _ in range(8):
            try:
                self.L = linalg.cholesky(K + (self.noise + jitter) * np.eye(len(K)), lower=True)
                break
            except linalg.LinAlgError:
                jitter = 1e-10 if jitter == 0 else jitter * 100
        else:
            raise NumericalError("GP kernel matrix is not positive definite after jitter escalation")
        self.alpha = linalg.cho_solve((self.L, True), z)
        self.X = X
        return self

    def predict(self, Q) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance in objective units."""
        if self.X is None:
            raise RuntimeError("fit() first")
        Q = np.atleast_2d(np.asarray([q.bits() if isinstance(q, Subset) else q for q in Q], dtype=bool))
        Ks = kernel_matrix(Q, self.X, self.lam)
        mean = Ks @ self.alpha
        v = linalg.solve_triangular(self.L, Ks.T, lower=True)
        var = np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
        return self.mu + self.sd * mean, self.sd ** 2 * var


def gp_posterior(X, y, query, lam: float = 0.5, noise: float = 1e-4, standardize: bool = True):
    mean, var = GPSurrogate(lam, noise, standardize).fit(X, y).predict([query])
    return float(mean[0]), float(var[0])


def expected_improvement(mu, sigma, best: float) -> np.ndarray:
    """EI for minimization; where sigma is 0 it is max(best - mu, 0)."""
    mu, sigma = np.broadcast_arrays(np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64))
    gain = np.atleast_1d(best - mu)
    sigma = np.atleast_1d(sigma)
    out = np.maximum(gain, 0.0)
    pos = sigma > 0
    with np.errstate(over="ignore", under="ignore"):
        z = gain[pos] / sigma[pos]
        out[pos] = gain[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return np.maximum(out, 0.0).reshape(mu.shape)


# --------------------------------------------------------------------------
# Candidates
# --------------------------------------------------------------------------

def random_subset(rng: np.random.Generator, fixed_count: int | None = None) -> Subset:
    if fixed_count is not None:
        bits = np.zeros(N_FEATURES, dtype=bool)
        bits[rng.choice(N_FEATURES, size=fixed_count, replace=False)] = True
        return Subset(tuple(bits))
    while True:
        bits = rng.random(N_FEATURES) < 0.5
        if bits.any():
            return Subset(tuple(bits))


def neighbours(s: Subset, fixed_count: int | None = None) -> list[Subset]:
    """One-bit flips (or, at a fixed count, one-in/one-out swaps) of ``s``."""
    out = []
    if fixed_count is None:
        for i in range(N_FEATURES):
            bits = list(s.include)
            bits[i] = not bits[i]
            if any(bits):
                out.append(Subset(tuple(bits)))
        return out
    on = [i for i, b in enumerate(s.include) if b]
    off = [i for i, b in enumerate(s.include) if not b]
    for i in on:
        for j in off:
            bits = list(s.include)
            bits[i], bits[j] = False, True
            out.append(Subset(tuple(bits)))
    return out


def candidate_pool(rng, incumbent: Subset | None, n_random: int = 256,
                   fixed_count: int | None = None, exclude=()) -> list[Subset]:
    """Random candidates then incumbent neighbours, deduplicated in order, minus ``exclude``."""
    pool = [random_subset(rng, fixed_count) for _ in range(n_random)]
    if incumbent is not None:
        pool += neighbours(incumbent, fixed_count)
    seen = set(exclude)
    out = []
    for s in pool:
        if s.key not in seen:
            seen.add(s.key)
            out.append(s)
    return out


def acquire(gp: GPSurrogate, best: float, candidates: Sequence[Subset]) -> tuple[Subset, float]:
    """Candidate with the highest EI; ties go to the lowest index."""
    if not candidates:
        raise ValueError("empty candidate pool")
    mu, var = gp.predict(candidates)
    ei = expected_improvement(mu, np.sqrt(var), best)
    i = int(np.argmax(ei))
    return candidates[i], float(ei[i])


# --------------------------------------------------------------------------
# Optimization loop and ledger
# --------------------------------------------------------------------------

@dataclass
class TrialRecord:
    iteration: int
    subset: Subset
    objective: float
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    failed: bool = False

    def to_json(self) -> str:
        obj = self.objective if math.isfinite(self.objective) else None
        return json.dumps({
            "iteration": self.iteration,
            "subset": self.subset.key,
            "features": list(self.subset.ids),
            "count": self.subset.count,
            "objective": obj,
            "metrics": {k: (v if v is None or math.isfinite(v) else None) for k, v in self.metrics.items()},
            "wall_clock": self.wall_clock,
            "failed": self.failed,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        d = json.loads(line)
        obj = math.inf if d["objective"] is None else float(d["objective"])
        m = {k: (math.nan if v is None else float(v)) for k, v in d.get("metrics", {}).items()}
        return cls(int(d["iteration"]), Subset.from_key(d["subset"]), obj, m,
                   float(d.get("wall_clock", 0.0)), bool(d.get("failed", False)))


def read_ledger(path) -> list[TrialRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(TrialRecord.from_json(line))
    for k, rec in enumerate(out, 1):
        if rec.iteration != k:
            raise ValueError(f"{path}: ledger iterations are not 1..n (line {k})")
    return out


def incumbent(ledger: Sequence[TrialRecord]) -> TrialRecord | None:
    ok = [r for r in ledger if not r.failed]
    return min(ok, key=lambda r: (r.objective, r.iteration)) if ok else None


def _evaluate(objective, subset) -> tuple[float, dict]:
    out = objective(subset)
    if isinstance(out, dict):
        m = {k: float(v) for k, v in out.items()}
        return m.get("RMSE", math.nan), m
    return float(out), {}


def initial_subsets(seed: int, n: int, fixed_count: int | None = None) -> list[Subset]:
    rng = np.random.default_rng([seed, 0])
    out, seen = [], set()
    while len(out) < n:
        s = random_subset(rng, fixed_count)
        if s.key not in seen:
            seen.add(s.key)
            out.append(s)
    return out


def optimize(objective: Callable[[Subset], float | dict], iterations: int = 100, seed: int = 0,
             n_initial: int = 10, lam: float = 0.5, noise: float = 1e-4, n_candidates: int = 256,
             fixed_count: int | None = None, ledger_path=None,
             stop_after: int | None = None) -> tuple[Subset | None, list[TrialRecord]]:
    """Minimize ``objective`` over feature subsets.

    Args:
        objective: maps a Subset to a float, or to a dict of metrics whose
            ``RMSE`` entry is the objective.
        iterations: total trial budget, counting any resumed trials.
        seed: run seed.
        n_initial: seeded random trials before the GP takes over.
        lam, noise: kernel length-scale and observation noise.
        n_candidates: random candidates per acquisition.
        fixed_count: restrict every subset to exactly this many features.
        ledger_path: JSON-lines ledger; existing trials are replayed, new ones appended.
        stop_after: stop once the ledger holds this many trials (simulates interruption).

    Returns:
        The incumbent subset (None if every trial failed) and the ledger.
    """
    if fixed_count is not None and not 1 <= fixed_count <= N_FEATURES:
        raise ValueError("fixed_count must lie in [1, 14]")
    ledger = read_ledger(ledger_path) if ledger_path is not None else []
    fh = open(ledger_path, "a") if ledger_path is not None else None
    try:
        init = initial_subsets(seed, n_initial, fixed_count)
        seen = {r.subset.key for r in ledger}
        limit = iterations if stop_after is None else min(iterations, stop_after)
        while len(ledger) < limit:
            it = len(ledger) + 1
            if it <= n_initial:
                subset = init[it - 1]
                if subset.key in seen:
                    raise ValueError("ledger does not match this seed's initial design")
            else:
                ok = [r for r in ledger if not r.failed]
                rng = np.random.default_rng([seed, it])
                inc = incumbent(ledger)
                pool = candidate_pool(rng, inc.subset if inc else None, n_candidates, fixed_count, seen)
                if not pool:
                    log.info("search space exhausted after %d trials", len(ledger))
                    break
                if ok:
                    gp = GPSurrogate(lam, noise).fit([r.subset for r in ok], [r.objective for r in ok])
                    subset, _ = acquire(gp, inc.objective, pool)
                else:
                    subset = pool[0]
            t0 = time.perf_counter()
            value, m = _evaluate(objective, subset)
            failed = not math.isfinite(value)
            rec = TrialRecord(it, subset, math.inf if failed else value, m,
                              time.perf_counter() - t0, failed)
            if not failed:
                rec.metrics.setdefault("RMSE", value)
            ledger.append(rec)
            seen.add(subset.key)
            if fh is not None:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            log.info("trial %d: %s -> %s", it, ",".join(subset.ids), rec.objective)
    finally:
        if fh is not None:
            fh.close()
    inc = incumbent(ledger)
    return (inc.subset if inc else None), ledger


def incumbent_trace(ledger: Sequence[TrialRecord]) -> list[float]:
    """Best objective after each trial."""
    best, out = math.inf, []
    for r in ledger:
        if not r.failed:
            best = min(best, r.objective)
        out.append(best)
    return out


def random_search(objective, iterations: int, seed: int, fixed_count: int | None = None):
    """Baseline: evaluate distinct uniformly random subsets."""
    ledger = []
    for it, s in enumerate(initial_subsets(seed + 1_000_003, iterations, fixed_count), 1):
        value, m = _evaluate(objective, s)
        ledger.append(TrialRecord(it, s, value if math.isfinite(value) else math.inf, m,
                                  failed=not math.isfinite(value)))
    inc = incumbent(ledger)
    return (inc.subset if inc else None), ledger


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def _stats(values: list[float]) -> tuple[float, float]:
    v = np.array([x for x in values if not math.isnan(x)])
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def report_by_count(ledger: Sequence[TrialRecord], metric_names=REPORT_METRICS) -> dict:
    """Mean and std of each metric per subset size, with best-count markers."""
    ok = [r for r in ledger if not r.failed]
    if not ok:
        raise ValueError("ledger has no successful trials")
    groups: dict[int, list[TrialRecord]] = {}
    for r in ok:
        groups.setdefault(r.subset.count, []).append(r)
    rows = []
    for k in sorted(groups):
        row = {"count": k, "n_trials": len(groups[k])}
        for m in metric_names:
            row[f"{m}_mean"], row[f"{m}_std"] = _stats([r.metrics.get(m, math.nan) for r in groups[k]])
        rows.append(row)
    best = {}
    for m in metric_names:
        vals = [(row[f"{m}_mean"], row["count"]) for row in rows if not math.isnan(row[f"{m}_mean"])]
        if vals:
            sign = 1 if LOWER_IS_BETTER.get(m, True) else -1
            best[m] = min(vals, key=lambda t: (sign * t[0], t[1]))[1]
    return {"rows": rows, "best": best}


def report_by_feature(ledger: Sequence[TrialRecord], metric_names=REPORT_METRICS,
                      top_k: int = TOP_K) -> list[dict]:
    """Per-feature mean and std over trials including it, ranked best-first per metric."""
    ok = [r for r in ledger if not r.failed]
    rows = []
    for f in FEATURE_IDS:
        trials = [r for r in ok if f in r.subset]
        row = {"feature": f, "n_trials": len(trials), "status": "sampled" if trials else "unsampled"}
        for m in metric_names:
            row[f"{m}_mean"], row[f"{m}_std"] = _stats([r.metrics.get(m, math.nan) for r in trials])
        rows.append(row)
    for m in metric_names:
        ranked = [r for r in rows if r["status"] == "sampled" and not math.isnan(r[f"{m}_mean"])]
        sign = 1 if LOWER_IS_BETTER.get(m, True) else -1
        ranked.sort(key=lambda r: (sign * r[f"{m}_mean"], FEATURE_IDS.index(r["feature"])))
        for r in rows:
            r[f"{m}_rank"], r[f"{m}_top{top_k}"] = None, False
        for i, r in enumerate(ranked, 1):
            r[f"{m}_rank"] = i
            r[f"{m}_top{top_k}"] = i <= top_k
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_reports(ledger: Sequence[TrialRecord], out_dir, metric_names=REPORT_METRICS) -> dict[str, Path]:
    import csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_count = report_by_count(ledger, metric_names)
    by_feature = report_by_feature(ledger, metric_names)
    paths = {"by_count": out_dir / "by_count.csv", "by_feature": out_dir / "by_feature.csv"}
    cols = ["count", "n_trials"] + [f"{m}_{s}" for m in metric_names for s in ("mean", "std")] \
        + [f"best_{m}" for m in metric_names]
    with open(paths["by_count"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in by_count["rows"]:
            marks = [str(by_count["best"].get(m) == row["count"]).lower() for m in metric_names]
            w.writerow([_fmt(row[c]) for c in cols[:-len(metric_names)]] + marks)
    cols = ["feature", "status", "n_trials"] + [f"{m}_{s}" for m in metric_names
                                                 for s in ("mean", "std", "rank", f"top{TOP_K}")]
    with open(paths["by_feature"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in by_feature:
            w.writerow([_fmt(row[c]) if not isinstance(row[c], bool) else str(row[c]).lower()
                        for c in cols])
    return paths


# --------------------------------------------------------------------------
# Objectives
# --------------------------------------------------------------------------

def count_objective(subset: Subset) -> float:
    """Known-minimum test objective: the number of included features."""
    return float(subset.count)


def planted_objective(required=("DEM", "SDEPTH", "FLIMP"), noise: float = 0.1, seed: int = 0):
    """0 for every superset of ``required``; otherwise 1 plus subset-keyed noise in [0, noise)."""
    req = Subset.from_ids(required)

    def f(subset: Subset) -> float:
        if all(b for a, b in zip(req.include, subset.include) if a):
            return 0.0
        key = int(subset.key, 2)
        return 1.0 + noise * float(np.random.default_rng([seed, key]).random())

    return f


def make_training_objective(dataset, train_cfg, model_kw: dict | None = None,
                            cnn: str = "DeepLabv3plus", rnn: str = "LSTM",
                            val_fraction: float = 0.8):
    """Trial objective: train a hybrid on the chosen features, score on held-out training events.

    The events of the training split are split again; the model fits the first
    part and the validation RMSE on the rest is the objective. The test split
    is never touched.
    """
    from . import trainer

    train_ev, _ = trainer.split_dataset(list(dataset.events), train_cfg.split_fraction,
                                        trainer.sub_seed(train_cfg.seed, "split"))
    fit_ev, val_ev = trainer.split_dataset(train_ev, val_fraction, trainer.sub_seed(train_cfg.seed, "bo"))
    scale = max(float(ev.rain.intensities.max()) for ev in fit_ev)
    mask = ~dataset.features.shared_mask

    def objective(subset: Subset) -> dict:
        x = dataset.features.array(subset.ids)
        tr = trainer.TrainSet([s for ev in fit_ev for s in trainer.event_samples(ev, x, mask, scale,
                                                                                train_cfg.mode)],
                              scale, subset.ids)
        va = trainer.TestSet([s for ev in val_ev for s in trainer.event_samples(ev, x, mask, scale,
                                                                               train_cfg.mode)],
                             scale, subset.ids)
        spec = trainer.model_spec_for(cnn, rnn, tr, **(model_kw or {}))
        model = trainer.assemble_hybrid(spec, trainer.sub_seed(train_cfg.seed, "init"))
        try:
            trainer.train(model, tr, train_cfg)
        except trainer.TrainingDiverged as exc:
            log.warning("trial diverged: %s", exc)
            return {"RMSE": math.inf}
        return trainer.evaluate(model, va).pooled

    return objective
