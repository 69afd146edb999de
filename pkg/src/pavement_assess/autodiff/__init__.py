"""Minimal float64 tensors with reverse-mode differentiation."""

from .functional import (
    adaptive_max_pool2d,
    concat,
    conv2d,
    cross_entropy,
    embedding_lookup,
    flatten_hwc,
    layer_norm,
    linear,
    log_softmax,
    softmax,
)
from .optim import Adam, OptimizerState, cosine_lr
from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scale,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "Adam",
    "DimensionError",
    "OptimizerState",
    "Tensor",
    "adaptive_max_pool2d",
    "add",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "cosine_lr",
    "conv2d",
    "cross_entropy",
    "div",
    "embedding_lookup",
    "exp",
    "flatten_hwc",
    "getitem",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "transpose",
    "tsum",
]
