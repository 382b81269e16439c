"""Dataset splitting, training loop, evaluation, timing and the 12-combo benchmark.

All randomness of a run derives from one integer seed through purpose-keyed
sub-seeds (``split``, ``init``, ``shuffle``, ``dropout``), so a run is
reproducible from its config alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .autodiff.functional import masked_mse
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor
from .models import ALL_COMBOS, HybridModel, ModelSpec, assemble_hybrid, load_model, save_model
from .models.layers import BatchNorm
from .synthdata import Dataset, Event

log = logging.getLogger(__name__)

SEED_PURPOSES = ("split", "init", "shuffle", "dropout", "bo")
BENCHMARK_COLUMNS = ("combo", "MAE", "RMSE", "NSE", "KGE", "train_time_per_epoch",
                     "inference_time", "param_count")
DEFAULT_FEATURES = ("DEM", "ASP", "SDEPTH", "TWI", "IMP_C", "FLIMP", "PIPE")


class TrainingDiverged(RuntimeError):
    pass


def sub_seed(seed: int, purpose: str) -> int:
    """Independent 63-bit seed for one purpose of a run."""
    if purpose not in SEED_PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence([int(seed), SEED_PURPOSES.index(purpose)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    clip: float = 1.0
    clip_mode: str = "per_array"
    split_fraction: float = 0.9
    seed: int = 0
    mode: str = "static"

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.mode not in ("static", "dynamic"):
            raise ValueError("mode must be 'static' or 'dynamic'")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Samples and splits
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Sample:
    x: np.ndarray        # (C, H, W)
    rain: np.ndarray     # (T,) normalized
    target: np.ndarray   # (H, W) metres
    mask: np.ndarray     # (H, W) bool
    event: int
    step: int            # -1 for maxH targets
    return_period: float


class _SampleSet:
    def __init__(self, samples: Sequence[Sample], rain_scale: float, feature_ids: Sequence[str]):
        if not samples:
            raise ValueError(f"empty {type(self).__name__}")
        self.samples = tuple(samples)
        self.rain_scale = float(rain_scale)
        self.feature_ids = tuple(feature_ids)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


class TrainSet(_SampleSet):
    """Samples a model may be fitted on."""


class TestSet(_SampleSet):
    """Held-out samples; only evaluation accepts them."""

    __test__ = False  # not a pytest class


def split_dataset(events: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle; the first ceil(fraction * n) items train, the rest test."""
    n = len(events)
    if n < 2:
        raise ValueError("need at least 2 events to split")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(n - 1, math.ceil(fraction * n - 1e-9))
    return [events[i] for i in perm[:k]], [events[i] for i in perm[k:]]


def event_samples(ev: Event, x: np.ndarray, mask: np.ndarray, rain_scale: float,
                  mode: str) -> list[Sample]:
    rain = ev.rain.intensities / rain_scale
    T = ev.rain.return_period
    if mode == "static":
        return [Sample(x, rain, ev.truth.max_depth, mask, ev.index, -1, T)]
    return [Sample(x, rain[:t + 1], ev.truth.depth_series[t], mask, ev.index, t, T)
            for t in range(ev.rain.steps)]


def build_sets(ds: Dataset, cfg: TrainConfig, feature_ids: Sequence[str] = DEFAULT_FEATURES,
               events: Sequence[Event] | None = None) -> tuple[TrainSet, TestSet]:
    """Split events and turn them into samples.

    Rainfall is divided by the largest step depth among the training events.
    """
    train_ev, test_ev = split_dataset(list(ds.events if events is None else events),
                                      cfg.split_fraction, sub_seed(cfg.seed, "split"))
    scale = max(float(ev.rain.intensities.max()) for ev in train_ev)
    x = ds.features.array(feature_ids)
    mask = ~ds.features.shared_mask
    tr = [s for ev in train_ev for s in event_samples(ev, x, mask, scale, cfg.mode)]
    te = [s for ev in test_ev for s in event_samples(ev, x, mask, scale, cfg.mode)]
    return TrainSet(tr, scale, feature_ids), TestSet(te, scale, feature_ids)


def collate(samples: Sequence[Sample]):
    """Stack samples; rainfall is left-padded with zeros to the longest sequence."""
    lengths = np.array([s.rain.size for s in samples])
    t = int(lengths.max())
    rain = np.zeros((len(samples), t))
    for i, s in enumerate(samples):
        rain[i, t - s.rain.size:] = s.rain
    x = np.stack([s.x for s in samples])
    target = np.stack([s.target for s in samples])
    mask = np.stack([s.mask for s in samples])
    return x, rain, lengths, target, mask


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HybridModel
    loss_trace: list[float]
    epoch_times: list[float]

    @property
    def time_per_epoch(self) -> float:
        return float(np.mean(self.epoch_times)) if self.epoch_times else float("nan")


def train(model: HybridModel, train_set: TrainSet, cfg: TrainConfig, callback=None) -> TrainResult:
    """Mini-batch Adam on masked MSE.

    Args:
        model: assembled hybrid, updated in place.
        train_set: training samples.
        cfg: hyperparameters and run seed.
        callback: optional ``callback(epoch, mean_loss, model)``; returning True stops early.
    """
    if not isinstance(train_set, TrainSet):
        raise TypeError("train() only accepts a TrainSet")
    shuffle_rng = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))
    dropout_rng = np.random.default_rng(sub_seed(cfg.seed, "dropout"))
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip, clip_mode=cfg.clip_mode)
    samples = train_set.samples
    n = len(samples)
    trace, times = [], []
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            x, rain, lengths, target, mask = collate(batch)
            pred = model(Tensor(x), Tensor(rain), lengths, rng=dropout_rng)
            loss = masked_mse(pred, target, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch)
        times.append(time.perf_counter() - t0)
        trace.append(total / n)
        log.debug("epoch %d loss %.6g", epoch + 1, trace[-1])
        if callback is not None and callback(epoch + 1, trace[-1], model):
            break
    recalibrate_batch_norm(model, samples, cfg.batch_size)
    return TrainResult(model, trace, times)


def recalibrate_batch_norm(model: HybridModel, samples: Sequence[Sample], batch_size: int = 8):
    """Replace running batch-norm statistics by their average over ``samples`` under
    the current weights (dropout off), then leave the model in eval mode.

    Running averages collected during training lag behind the weights; when the
    batch variance of a channel is near zero (identical terrain in every sample)
    that lag is amplified by 1/sqrt(eps) at inference.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm)]
    momenta = [bn.momentum for bn in bns]
    for bn in bns:
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 0.0
    model.train()
    model.rnn.eval()
    try:
        for k, start in enumerate(range(0, len(samples), batch_size)):
            for bn in bns:
                bn.momentum = 1.0 / (k + 1)
            x, rain, lengths, _, _ = collate(samples[start:start + batch_size])
            model(Tensor(x), Tensor(rain), lengths)
    finally:
        for bn, m in zip(bns, momenta):
            bn.momentum = m
        model.eval()


def predict_samples(model: HybridModel, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch_size):
        x, rain, lengths, _, _ = collate(samples[start:start + batch_size])
        out.extend(model.predict(x, rain, lengths))
    return out


def set_loss(model: HybridModel, samples: Sequence[Sample], batch_size: int = 8) -> float:
    """Eval-mode masked MSE over every valid pixel of ``samples``."""
    preds = predict_samples(model, samples, batch_size)
    s = metrics.pooled([x.target for x in samples], preds, [x.mask for x in samples])
    d = s.obs - s.sim
    return float(np.mean(d * d))


@dataclass
class EvalReport:
    pooled: dict[str, float]
    per_event: list[dict]
    per_return_period: list[metrics.ReturnPeriodRow]
    predictions: list[np.ndarray] = field(repr=False, default_factory=list)


def _safe_metrics(s: metrics.PairedSeries) -> dict[str, float]:
    out = {"MAE": metrics.mae(s), "RMSE": metrics.rmse(s)}
    for name, fn in (("NSE", metrics.nse), ("KGE", lambda q: metrics.kge(q).kge)):
        try:
            out[name] = fn(s)
        except metrics.MetricError:
            out[name] = float("nan")
    return out


def evaluate(model: HybridModel, test_set: TestSet, batch_size: int = 8,
             scatter_dir=None) -> EvalReport:
    """Pooled-pixel metrics plus per-event and per-return-period breakdowns."""
    if not isinstance(test_set, TestSet):
        raise TypeError("evaluate() only accepts a TestSet")
    samples = test_set.samples
    preds = predict_samples(model, samples, batch_size)
    obs = [s.target for s in samples]
    masks = [s.mask for s in samples]
    pooled = _safe_metrics(metrics.pooled(obs, preds, masks))
    per_event = []
    for s, p in zip(samples, preds):
        row = {"event": s.event, "step": s.step, "return_period": s.return_period}
        row.update(_safe_metrics(metrics.PairedSeries.from_masked(s.target, p, s.mask)))
        per_event.append(row)
    rp = metrics.per_return_period([s.return_period for s in samples], obs, preds, masks,
                                   scatter_dir=scatter_dir)
    return EvalReport(pooled, per_event, rp, preds)


def inference_time(model: HybridModel, sample: Sample, repeats: int = 20, warmup: int = 3) -> float:
    """Median wall-clock seconds of single-image eval forwards."""
    x, rain, lengths, _, _ = collate([sample])
    for _ in range(warmup):
        model.predict(x, rain, lengths)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(x, rain, lengths)
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    combo: str
    cnn_kind: str
    rnn_kind: str
    loss_trace: list[float]
    metrics: dict[str, float]
    train_time_per_epoch: float
    train_time_total: float
    inference_time: float
    parameter_count: int
    per_event: list[dict] = field(default_factory=list)
    cached: bool = False


def model_spec_for(cnn: str, rnn: str, train_set: TrainSet, **model_kw) -> ModelSpec:
    c, h, w = train_set.samples[0].x.shape
    return ModelSpec(cnn, rnn, c, h, w, **model_kw)


def run_combo(cnn: str, rnn: str, train_set: TrainSet, test_set: TestSet, cfg: TrainConfig,
              model_kw: dict | None = None, cache_dir=None) -> RunReport:
    spec = model_spec_for(cnn, rnn, train_set, **(model_kw or {}))
    ckpt = None if cache_dir is None else Path(cache_dir) / f"{spec.combo}.ckpt"
    key = {"train": cfg.digest(), "features": list(train_set.feature_ids),
           "rain_scale": train_set.rain_scale, "n_train": len(train_set)}
    cached = False
    if ckpt is not None and ckpt.exists():
        model, meta = load_model(ckpt)
        if model.spec == spec and meta.get("key") == key:
            trace, times = meta["loss_trace"], meta["epoch_times"]
            cached = True
            log.info("%s: reusing %s", spec.combo, ckpt)
    if not cached:
        model = assemble_hybrid(spec, sub_seed(cfg.seed, "init"))
        res = train(model, train_set, cfg)
        trace, times = res.loss_trace, res.epoch_times
        if ckpt is not None:
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_model(model, ckpt, {"key": key, "loss_trace": trace, "epoch_times": times})
    model.eval()
    rep = evaluate(model, test_set)
    return RunReport(spec.combo, cnn, rnn, list(trace), rep.pooled,
                     float(np.mean(times)) if times else float("nan"), float(np.sum(times)),
                     inference_time(model, test_set.samples[0]), model.parameter_count,
                     rep.per_event, cached)


def benchmark_matrix(train_set: TrainSet, test_set: TestSet, cfg: TrainConfig,
                     model_kw: dict | None = None, combos=ALL_COMBOS, cache_dir=None,
                     out_dir=None) -> list[RunReport]:
    """Train and evaluate every (CNN, RNN) pair with one shared seed."""
    reports = []
    for cnn, rnn in combos:
        log.info("benchmark: %s+%s", rnn, cnn)
        reports.append(run_combo(cnn, rnn, train_set, test_set, cfg, model_kw, cache_dir))
    if out_dir is not None:
        write_benchmark(reports, out_dir)
    return reports


def best_markers(reports: Sequence[RunReport]) -> dict[str, str]:
    """Best combo per metric: lowest MAE/RMSE, highest NSE/KGE; ties go to the
    lexicographically first combo name."""
    out = {}
    for m in metrics.METRIC_NAMES:
        sign = 1.0 if m in ("MAE", "RMSE") else -1.0
        cands = [r for r in reports if not math.isnan(r.metrics[m])]
        if cands:
            out[m] = min(cands, key=lambda r: (sign * r.metrics[m], r.combo)).combo
    return out


def write_benchmark(reports: Sequence[RunReport], out_dir) -> dict[str, Path]:
    """Write the full matrix, a timing-free metrics table, best markers and loss traces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"matrix": out_dir / "benchmark.csv", "metrics": out_dir / "benchmark_metrics.csv",
             "best": out_dir / "benchmark_best.csv", "losses": out_dir / "loss_traces.csv"}
    with open(paths["matrix"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCHMARK_COLUMNS)
        for r in reports:
            w.writerow([r.combo] + [repr(float(r.metrics[m])) for m in metrics.METRIC_NAMES]
                       + [f"{r.train_time_per_epoch:.6f}", f"{r.inference_time:.6f}", r.parameter_count])
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("combo",) + metrics.METRIC_NAMES + ("param_count",))
        for r in reports:
            w.writerow([r.combo] + [repr(float(r.metrics[m])) for m in metrics.METRIC_NAMES] + [r.parameter_count])
    with open(paths["best"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "best_combo"))
        for m, combo in best_markers(reports).items():
            w.writerow((m, combo))
    with open(paths["losses"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("combo", "epoch", "mean_loss"))
        for r in reports:
            for e, v in enumerate(r.loss_trace, 1):
                w.writerow((r.combo, e, repr(float(v))))
    return paths


def write_loss_trace(trace: Sequence[float], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "mean_loss"))
        for e, v in enumerate(trace, 1):
            w.writerow((e, repr(float(v))))
