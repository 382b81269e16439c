"""Recurrent rainfall encoders (LSTM, BiLSTM, GRU).

A batch of hyetographs of different lengths is left-padded with zeros and
carries a per-step validity mask; on padded steps the recurrent state is held
fixed, so a padded sequence encodes exactly like the unpadded one.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, as_tensor, concat, leaky_relu, where
from .layers import Linear, Module

RNN_KINDS = ("LSTM", "BiLSTM", "GRU")
DEFAULT_DROPOUT = 0.2


class RecurrentLayer(Module):
    """One unidirectional LSTM or GRU layer over a (N, T, D) sequence."""

    def __init__(self, cell: str, input_size: int, hidden: int, rng: np.random.Generator,
                 reverse: bool = False):
        super().__init__()
        if cell not in ("LSTM", "GRU"):
            raise ValueError(f"unknown cell {cell!r}")
        self.cell, self.hidden, self.reverse = cell, hidden, reverse
        blocks = 4 if cell == "LSTM" else 3
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = self.param("w_ih", rng.uniform(-bound, bound, (blocks * hidden, input_size)))
        self.w_hh = self.param("w_hh", rng.uniform(-bound, bound, (blocks * hidden, hidden)))
        b = np.zeros(blocks * hidden)
        if cell == "LSTM":
            b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = self.param("bias", b)

    def __call__(self, seq: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        """Run the layer.

        Args:
            seq: (N, T, D) inputs.
            valid: (N, T) boolean step mask.

        Returns:
            Per-step outputs (N, T, hidden) in original time order and the
            final hidden state (N, hidden).
        """
        n, t, d = seq.shape
        xproj = F.linear(seq.reshape(n * t, d), self.w_ih, self.bias).reshape(n, t, -1)
        h = Tensor(np.zeros((n, self.hidden)))
        c = Tensor(np.zeros((n, self.hidden)))
        steps = range(t - 1, -1, -1) if self.reverse else range(t)
        outs = [None] * t
        for s in steps:
            xs = xproj[:, s, :]
            keep = valid[:, s:s + 1]
            if self.cell == "LSTM":
                h_new, c_new = F.lstm_gates(xs, h, c, self.w_hh)
                c = c_new if keep.all() else where(keep, c_new, c)
            else:
                h_new = F.gru_gates(xs, h, self.w_hh)
            h = h_new if keep.all() else where(keep, h_new, h)
            outs[s] = h.reshape(n, 1, self.hidden)
        return concat(outs, axis=1), h


class RecurrentEncoder(Module):
    """Two recurrent layers, dropout, LeakyReLU, FC and reshape to a bottleneck-shaped map."""

    def __init__(self, kind: str, hidden: int, fusion_channels: int, hb: int, wb: int,
                 rng: np.random.Generator, dropout: float = DEFAULT_DROPOUT, layers: int = 2):
        super().__init__()
        if kind not in RNN_KINDS:
            raise ValueError(f"unknown RNN kind {kind!r}; expected one of {RNN_KINDS}")
        self.kind, self.dropout = kind, dropout
        self.out_shape = (fusion_channels, hb, wb)
        cell = "GRU" if kind == "GRU" else "LSTM"
        bidir = kind == "BiLSTM"
        width = 2 * hidden if bidir else hidden
        self.layers = []
        size = 1
        for i in range(layers):
            fwd = self.child(f"layer{i + 1}", RecurrentLayer(cell, size, hidden, rng))
            bwd = (self.child(f"layer{i + 1}_reverse", RecurrentLayer(cell, size, hidden, rng, reverse=True))
                   if bidir else None)
            self.layers.append((fwd, bwd))
            size = width
        self.fc = self.child("fc", Linear(width, fusion_channels * hb * wb, rng))

    def __call__(self, rain, lengths=None, rng: np.random.Generator | None = None) -> Tensor:
        """Encode rainfall sequences.

        Args:
            rain: (N, T) array or Tensor, left-padded when lengths differ.
            lengths: true length per row; defaults to T for every row.
            rng: dropout generator, required in training mode.

        Returns:
            (N, fusion_channels, Hb, Wb) tensor.
        """
        rain = as_tensor(rain)
        if rain.ndim == 1:
            rain = rain.reshape(1, -1)
        n, t = rain.shape
        if t == 0:
            raise ValueError("empty rainfall sequence")
        if lengths is None:
            lengths = np.full(n, t)
        lengths = np.asarray(lengths)
        if np.any(lengths < 1) or np.any(lengths > t):
            raise ValueError("rainfall lengths must lie in [1, T]")
        valid = np.arange(t)[None, :] >= (t - lengths)[:, None]
        x = rain.reshape(n, t, 1)
        summary = None
        for i, (fwd, bwd) in enumerate(self.layers):
            out_f, h_f = fwd(x, valid)
            if bwd is not None:
                out_b, h_b = bwd(x, valid)
                x = concat([out_f, out_b], axis=2)
                summary = concat([h_f, h_b], axis=1)
            else:
                x, summary = out_f, h_f
            if i + 1 < len(self.layers):
                x = F.dropout(x, self.dropout, self.training, rng)
        summary = leaky_relu(F.dropout(summary, self.dropout, self.training, rng), 0.01)
        return self.fc(summary).reshape((n,) + self.out_shape)


def build_rnn(kind: str, hidden: int, fusion_channels: int, hb: int, wb: int,
              rng: np.random.Generator, dropout: float = DEFAULT_DROPOUT,
              layers: int = 2) -> RecurrentEncoder:
    return RecurrentEncoder(kind, hidden, fusion_channels, hb, wb, rng, dropout, layers)
