"""Layer primitives with hand-written backward passes.

Images are ``(N, C, H, W)``. Convolution is cross-correlation (no kernel
flip). ``conv2d`` and ``conv_transpose2d`` share the same im2col/col2im pair
and are exact adjoints of each other for a shared weight array.
"""

from __future__ import annotations

import numpy as np

from .tensor import (ShapeError, Tensor, add, as_tensor, concat, leaky_relu, make_op, mul,
                     note_branch, relu, sigmoid, square, sub, tanh)

__all__ = [
    "conv2d", "conv_transpose2d", "max_pool2d", "max_unpool2d", "batch_norm",
    "dropout", "global_avg_pool", "linear", "fully_connected", "masked_mse",
    "lstm_cell", "gru_cell", "concat_channels", "relu", "leaky_relu", "sigmoid",
    "tanh", "EmptyMaskError",
]


class EmptyMaskError(ValueError):
    """A masked reduction has no valid element."""


def _out_size(n, k, stride, pad, dilation):
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """(N, C, Hp, Wp) -> (C, kh, kw, N, ho, wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            patch = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
            cols[:, a, b] = patch.transpose(1, 0, 2, 3)
    return cols


def _col2im(cols, padded_shape, stride, dilation):
    """Adjoint of :func:`_im2col`: scatter-add columns back into an image."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros(padded_shape)
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += \
                cols[:, a, b].transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           dilation: int = 1) -> Tensor:
    """Zero-padded cross-correlation. ``w`` is ``(K, C, kh, kw)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, pad, dilation), _out_size(wd, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) too large for {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(k, -1)
    out = (wmat @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, k, 1, 1)
    padded_shape = xp.shape

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(k, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gx = _col2im(gcols, padded_shape, stride, dilation)
            if pad:
                gx = gx[:, :, pad:pad + h, pad:pad + wd]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, as_tensor(b))
    return make_op(out, parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
                     dilation: int = 1, output_padding: int = 0) -> Tensor:
    """Fractionally strided convolution; the adjoint of :func:`conv2d`.

    ``w`` is ``(C_in, C_out, kh, kw)`` so the same array serves both directions.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    hf = (h - 1) * stride + dilation * (kh - 1) + 1 + output_padding
    wf = (wd - 1) * stride + dilation * (kw - 1) + 1 + output_padding
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    wmat = w.data.reshape(cin, -1)
    cols = (wmat.T @ xmat).reshape(cout, kh, kw, n, h, wd)
    full = _col2im(cols, (n, cout, hf, wf), stride, dilation)
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    else:
        out = out.copy()

    def bw(g):
        gp = np.zeros((n, cout, hf, wf))
        gp[:, :, pad:pad + ho, pad:pad + wo] = g
        gcols = _im2col(gp, kh, kw, stride, dilation, h, wd).reshape(cout * kh * kw, -1)
        gx = (wmat @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (xmat @ gcols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, as_tensor(b))
    return make_op(out, parents, bw)


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Window maxima and flat ``row * W + col`` argmax indices per (N, C) plane.

    Ties go to the first position in row-major window order.
    """
    stride = k if stride is None else stride
    n, c, h, wd = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    if ho < 1 or wo < 1 or (stride == k and (h % k or wd % k)):
        raise ShapeError(f"max_pool2d: {h}x{wd} not divisible into {k}x{k} windows")
    rows = (np.arange(ho) * stride)[:, None]
    cols = (np.arange(wo) * stride)[None, :]
    xd = x.data
    best = xd[:, :, 0:stride * (ho - 1) + 1:stride, 0:stride * (wo - 1) + 1:stride].copy()
    idx = np.broadcast_to(rows * wd + cols, best.shape).copy()
    for a in range(k):
        for b in range(k):
            if a == 0 and b == 0:
                continue
            cand = xd[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            upd = cand > best
            best = np.where(upd, cand, best)
            idx = np.where(upd, (rows + a) * wd + cols + b, idx)
    flat_idx = idx.reshape(n, c, -1)
    note_branch(idx)

    def bw(g):
        gx = np.zeros((n, c, h * wd))
        if stride >= k:
            np.put_along_axis(gx, flat_idx, g.reshape(n, c, -1), axis=2)
        else:
            ni, ci = np.indices(flat_idx.shape)[:2]
            np.add.at(gx, (ni, ci, flat_idx), g.reshape(n, c, -1))
        return (gx.reshape(n, c, h, wd),)

    return make_op(best, (x,), bw), idx


def max_unpool2d(y: Tensor, indices: np.ndarray, out_shape: tuple[int, int]) -> Tensor:
    """Place ``y`` at its stored argmax positions of an ``out_shape`` zero map."""
    n, c = y.shape[:2]
    h, wd = out_shape
    flat_idx = np.asarray(indices).reshape(n, c, -1)
    if indices.shape != y.shape:
        raise ShapeError(f"max_unpool2d: indices {indices.shape} vs values {y.shape}")
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= h * wd):
        raise IndexError(f"max_unpool2d: index out of range for output {h}x{wd}")
    out = np.zeros((n, c, h * wd))
    np.put_along_axis(out, flat_idx, y.data.reshape(n, c, -1), axis=2)

    def bw(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat_idx, axis=2).reshape(y.shape),)

    return make_op(out.reshape(n, c, h, wd), (y,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W) (or N for 2-D input).

    In training mode the batch statistics are used and the running arrays are
    updated in place with the biased batch variance, so a model evaluated on
    its own training batch sees the statistics it was trained with.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"batch_norm: {ch} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, ch) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = x.size // ch
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(ch)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(ch)

        def bw(g):
            gxhat = g * gd
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = gd * xhat + beta.data.reshape(bshape)
    return make_op(out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the exact identity in eval mode or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(x.shape) >= p
    scale = 1.0 - p
    return make_op(np.where(keep, x.data / scale, 0.0), (x,),
                   lambda g: (np.where(keep, g / scale, 0.0),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, wd = x.shape
    inv = 1.0 / (h * wd)
    return make_op(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``x`` (N, in), ``w`` (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data

    def bw(g):
        return (g @ wd if x.requires_grad else None,
                g.T @ xd if w.requires_grad else None,
                g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, as_tensor(b))
    return make_op(out, parents, bw)


fully_connected = linear


def concat_channels(xs) -> Tensor:
    return concat(xs, axis=1)


def masked_mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over valid (``mask`` True) elements only."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"masked_mse: prediction {pred.shape} vs target {t.shape}")
    valid = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=bool), pred.shape)
    count = int(valid.sum())
    if count == 0:
        raise EmptyMaskError("masked_mse: mask has no valid element")
    diff = np.where(valid, pred.data - t, 0.0)
    loss = np.array((diff * diff).sum() / count)
    return make_op(loss, (pred,), lambda g: (g * 2.0 * diff / count,))


# --------------------------------------------------------------------------
# Recurrent cells
# --------------------------------------------------------------------------

def lstm_gates(xproj: Tensor, h: Tensor, c: Tensor, w_hh: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step given the precomputed input projection ``W_ih x + b``.

    Gate blocks are stacked in (input, forget, cell, output) order.
    """
    hid = h.shape[1]
    z = add(xproj, linear(h, w_hh))
    i = sigmoid(z[:, 0:hid])
    f = sigmoid(z[:, hid:2 * hid])
    g = tanh(z[:, 2 * hid:3 * hid])
    o = sigmoid(z[:, 3 * hid:4 * hid])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hid = h.shape[1]
    if w_ih.shape != (4 * hid, x.shape[1]) or w_hh.shape != (4 * hid, hid) or c.shape != h.shape:
        raise ShapeError("lstm_cell: inconsistent hidden/input sizes")
    return lstm_gates(linear(x, w_ih, b), h, c, w_hh)


def gru_gates(xproj: Tensor, h: Tensor, w_hh: Tensor) -> Tensor:
    """One GRU step; blocks stacked in (update, reset, candidate) order.

    ``h' = (1 - z) * h + z * n`` with ``n = tanh(W x + r * (U h) + b)``.
    """
    hid = h.shape[1]
    hp = linear(h, w_hh)
    z = sigmoid(add(xproj[:, 0:hid], hp[:, 0:hid]))
    r = sigmoid(add(xproj[:, hid:2 * hid], hp[:, hid:2 * hid]))
    n = tanh(add(xproj[:, 2 * hid:], mul(r, hp[:, 2 * hid:])))
    return add(h, mul(z, sub(n, h)))


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    x, h = as_tensor(x), as_tensor(h)
    hid = h.shape[1]
    if w_ih.shape != (3 * hid, x.shape[1]) or w_hh.shape != (3 * hid, hid):
        raise ShapeError("gru_cell: inconsistent hidden/input sizes")
    return gru_gates(linear(x, w_ih, b), h, w_hh)


def mse(a: Tensor, b) -> Tensor:
    return square(sub(a, b)).mean()

