"""Adam with per-array (or global) gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = 1.0
    clip_mode: str = "per_array"   # or "global"
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float | None,
                   mode: str = "per_array") -> list[np.ndarray]:
    if clip_norm is None:
        return list(grads)
    if mode == "per_array":
        out = []
        for g in grads:
            norm = float(np.sqrt(np.sum(g * g)))
            out.append(g * (clip_norm / norm) if norm > clip_norm else g)
        return out
    if mode == "global":
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        scale = clip_norm / norm if norm > clip_norm else 1.0
        return [g * scale for g in grads]
    raise ValueError(f"unknown clip mode {mode!r}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> None:
    """Clip, then apply one bias-corrected Adam update to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    grads = clip_gradients(grads, state.clip_norm, state.clip_mode)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Optimizer over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr=0.01, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, clip_norm: float | None = 1.0, clip_mode="per_array"):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, epsilon, clip_norm, clip_mode)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)
