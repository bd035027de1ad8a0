"""Minimal reverse-mode autodiff: tensors, layers, losses, SGD, gradient checks."""

from fedsim.tensor.engine import (
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    index,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    segment_max,
    sparse_matmul,
    square,
    tsum,
)
from fedsim.tensor.gradcheck import autodiff, grad_check, numeric_gradient, relative_error
from fedsim.tensor.losses import (
    KL_FLOOR,
    cross_entropy,
    dense_forward,
    kl_divergence,
    mse,
    softmax_with_temperature,
)
from fedsim.tensor.params import Gradient, ParamVector, sgd_step

__all__ = [
    "KL_FLOOR",
    "Gradient",
    "ParamVector",
    "Tensor",
    "add",
    "as_tensor",
    "autodiff",
    "concat",
    "cross_entropy",
    "dense_forward",
    "exp",
    "grad_check",
    "index",
    "kl_divergence",
    "log_softmax",
    "matmul",
    "mean",
    "mse",
    "mul",
    "neg",
    "numeric_gradient",
    "relative_error",
    "relu",
    "reshape",
    "segment_max",
    "sgd_step",
    "softmax_with_temperature",
    "sparse_matmul",
    "square",
    "tsum",
]
