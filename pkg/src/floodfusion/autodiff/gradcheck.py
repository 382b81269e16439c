"""Central finite-difference gradient checks.

Two things can make a single central difference disagree with a correct
gradient. ReLU and max-pooling are only piecewise smooth, and a difference
whose probes fall on different pieces measures a chord; each probe therefore
records its branch decisions, and probes that differ from the unperturbed pass
are discarded. Batch statistics over very few values (batch norm at a 1x1
bottleneck) have large curvature, so one step can carry sizeable truncation
error; the step shrinks by 10x until two successive estimates agree, and the
larger step of the most stable pair is used (smaller steps lose digits to
roundoff). An entry without any kink-free probe down to
``min_h`` is reported as skipped.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero gradients meaningful."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def sample_entries(params: Sequence[Tensor], n_samples: int,
                   rng: np.random.Generator) -> list[tuple[int, int]]:
    """Distinct (tensor index, flat index) pairs: one per tensor, the rest uniform
    without replacement over all remaining entries."""
    sizes = np.array([p.size for p in params], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    first = [int(offsets[i] + rng.integers(n)) for i, n in enumerate(sizes)]
    rest = np.setdiff1d(np.arange(offsets[-1]), first)
    extra = min(max(0, n_samples - len(first)), rest.size)
    chosen = first + [int(g) for g in rng.choice(rest, size=extra, replace=False)]
    owners = np.searchsorted(offsets, chosen, side="right") - 1
    return [(int(i), int(g - offsets[i])) for i, g in zip(owners, chosen)]


def _probe(loss_fn) -> tuple[float, list]:
    with record_kinks() as log:
        value = loss_fn().item()
    return value, log


def _roundoff(scale: float, step: float) -> float:
    return 4 * np.finfo(np.float64).eps * scale / step


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    entries: Sequence[tuple[int, int]] | None = None, h: float = 1e-4,
                    floor: float = 1e-6, min_h: float = 1e-8, agree: float = 1e-6) -> dict:
    """Compare backward() gradients against central differences.

    Args:
        loss_fn: rebuilds the graph on each call; must be deterministic.
        params: tensors whose gradients are checked.
        entries: (tensor index, flat index) pairs; all entries when None.
        h: initial step, divided by 10 on a kink crossing or until two
            successive estimates agree to ``agree`` relative.
        floor: denominator floor of the relative error.
        min_h: smallest step tried.
        agree: relative tolerance for two successive estimates to count as converged.

    Returns:
        dict with ``max_rel_error`` over checked entries, ``n_checked``,
        ``n_skipped`` and per-entry ``details`` tuples
        (tensor index, flat index, analytic, numeric, rel error, step).
    """
    for p in params:
        p.grad = None
    with record_kinks() as base:
        loss = loss_fn()
    scale = max(abs(loss.item()), 1.0)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    if entries is None:
        entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    details, skipped = [], []
    worst = 0.0
    for i, j in entries:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        estimates = []
        step = h
        while step >= min_h:
            flat[j] = orig + step
            up, log_up = _probe(loss_fn)
            flat[j] = orig - step
            down, log_down = _probe(loss_fn)
            flat[j] = orig
            if log_up == base and log_down == base:
                estimates.append((step, (up - down) / (2 * step)))
                if len(estimates) >= 2:
                    (s0, d0), (_, d1) = estimates[-2:]
                    if abs(d0 - d1) <= agree * max(abs(d0), abs(d1)) + _roundoff(scale, s0):
                        break
            step /= 10
        if not estimates:
            skipped.append((i, j))
            continue
        if len(estimates) == 1:
            step, numeric = estimates[0]
        else:
            # truncation error is judged by the change to the next smaller step,
            # roundoff by its bound at the step itself
            k = min(range(len(estimates) - 1),
                    key=lambda k: abs(estimates[k][1] - estimates[k + 1][1])
                    + _roundoff(scale, estimates[k][0]))
            step, numeric = estimates[k]
        a = float(analytic[i].reshape(-1)[j])
        err = relative_error(a, numeric, floor)
        worst = max(worst, err)
        details.append((i, j, a, numeric, err, step))
    return {"max_rel_error": worst, "n_checked": len(details), "n_skipped": len(skipped),
            "skipped": skipped, "details": details}
