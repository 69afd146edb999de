"""Network primitives on :class:`Tensor` with hand-written backward rules."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, add, as_tensor, make, matmul, relu, scale

__all__ = [
    "add",
    "scale",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "conv2d",
    "concat",
    "embedding_lookup",
    "adaptive_max_pool2d",
    "flatten_hwc",
    "layer_norm",
    "cross_entropy",
    "linear",
]


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make(s, (x,), fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), fn, "log_softmax")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight shaped (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _pair(p) -> tuple[int, int]:
    if isinstance(p, int):
        return p, p
    ph, pw = p
    return int(ph), int(pw)


def conv2d(x, weight, bias=None, padding=0) -> Tensor:
    """Stride-1 convolution with zero padding on channels-last input.

    ``x`` is (H, W, C_in) or (N, H, W, C_in); ``weight`` is
    (kh, kw, C_in, C_out); ``bias`` is (C_out,). ``padding`` is an int or
    an (ph, pw) pair.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected x rank 3/4 and weight rank 4, got {x.shape} and {weight.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    kh, kw, cin, cout = weight.shape
    if xd.shape[-1] != cin:
        raise DimensionError(f"conv2d: input has {xd.shape[-1]} channels, weight {weight.shape} expects {cin}")
    ph, pw = _pair(padding)
    n, h, w, _ = xd.shape
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, ho, wo, cin, kh, kw)
    w_cfirst = weight.data.transpose(2, 0, 1, 3)  # (cin, kh, kw, cout)
    out = np.tensordot(windows, w_cfirst, axes=([3, 4, 5], [0, 1, 2]))
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        g4 = g if batched else g[None]
        grads: list[np.ndarray | None] = []
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += g4 @ weight.data[i, j].T
            gx = gxp[:, ph : ph + h, pw : pw + w, :]
            grads.append(gx if batched else gx[0])
        else:
            grads.append(None)
        if weight.requires_grad:
            gw = np.tensordot(windows, g4, axes=([0, 1, 2], [0, 1, 2]))  # (cin, kh, kw, cout)
            grads.append(gw.transpose(1, 2, 0, 3))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return grads

    return make(out if batched else out[0], parents, fn, "conv2d")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return np.split(g, splits, axis=axis)

    return make(out, tensors, fn, "concat")


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` (V, d) selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: id out of range for table with {table.shape[0]} rows")

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make(table.data[ids], (table,), fn, "embedding")


def _pool_bounds(size: int, pooled: int) -> list[tuple[int, int]]:
    return [((i * size) // pooled, ((i + 1) * size) // pooled) for i in range(pooled)]


def adaptive_max_pool2d(x, out_h: int, out_w: int) -> Tensor:
    """Max over windows ``[floor(iH/H_p), floor((i+1)H/H_p))`` per channel.

    Gradient goes to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"adaptive_max_pool2d: expected (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"adaptive_max_pool2d: pooled size {(out_h, out_w)} exceeds input {(h, w)}")
    out = np.empty((out_h, out_w, c))
    rows = np.empty((out_h, out_w, c), dtype=np.int64)
    cols = np.empty((out_h, out_w, c), dtype=np.int64)
    chans = np.arange(c)
    for i, (r0, r1) in enumerate(_pool_bounds(h, out_h)):
        for j, (c0, c1) in enumerate(_pool_bounds(w, out_w)):
            window = x.data[r0:r1, c0:c1, :].reshape(-1, c)
            k = window.argmax(axis=0)
            out[i, j] = window[k, chans]
            rows[i, j] = r0 + k // (c1 - c0)
            cols[i, j] = c0 + k % (c1 - c0)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols, np.broadcast_to(chans, rows.shape)), g)
        return (full,)

    return make(out, (x,), fn, "adaptive_max_pool2d")


def flatten_hwc(x) -> Tensor:
    """(H, W, C) -> (H*W*C,) with channel fastest, then column, then row."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"flatten_hwc: expected rank 3, got {x.shape}")
    return x.reshape(-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        dy = g * gamma.data
        dx = inv_std * (dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(xhat * gamma.data + beta.data, (x, gamma, beta), fn, "layer_norm")


def cross_entropy(logits, targets, ignore_id: int | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under row-wise softmax.

    Positions whose target equals ``ignore_id`` contribute nothing.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[1]
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    bad = keep & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise ValueError(f"cross_entropy: target {int(targets[bad][0])} outside [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum()

    def fn(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~keep] = 0.0
        return (g * grad,)

    return make(np.array(loss), (logits,), fn, "cross_entropy")
