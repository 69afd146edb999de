"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    indices: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``fn()`` w.r.t. selected flat entries of ``param``."""
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.empty(idx.size)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[k] = (up - down) / (2 * h)
    return idx, out


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-4,
) -> dict[str, float]:
    """Relative error per parameter between backprop and central differences.

    With ``max_entries`` set, each parameter is checked on a random subset of
    that many entries.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        indices = None
        if max_entries is not None and p.size > max_entries:
            indices = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        idx, num = numeric_grad(fn, p, h, indices)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], num, floor)
    return errors
