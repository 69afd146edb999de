"""Parameter initializers."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def dense(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    return glorot_uniform(rng, (n_in, n_out), n_in, n_out)


def conv(rng: np.random.Generator, kh: int, kw: int, c_in: int, c_out: int) -> Tensor:
    return glorot_uniform(rng, (kh, kw, c_in, c_out), kh * kw * c_in, kh * kw * c_out)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
