from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from fedsim.errors import GradCheckError
from fedsim.tensor.engine import Tensor
from fedsim.tensor.params import ParamVector

LossAndGrad = Callable[[ParamVector], "tuple[float, ParamVector]"]

STEP = 1e-5


def autodiff(forward: Callable[[Mapping[str, Tensor]], Tensor]) -> LossAndGrad:
    """Wrap a leaf-based forward function into ``params -> (loss, grad)``."""

    def loss_and_grad(params: ParamVector) -> tuple[float, ParamVector]:
        leaves = params.leaves()
        loss = forward(leaves)
        loss.backward()
        return loss.item(), params.gradient_from(leaves)

    return loss_and_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))


def numeric_gradient(loss_and_grad: LossAndGrad, params: ParamVector, h: float = STEP) -> np.ndarray:
    flat = params.flatten()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + h
        f_plus, _ = loss_and_grad(params.unflatten(probe))
        probe[i] = flat[i] - h
        f_minus, _ = loss_and_grad(params.unflatten(probe))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise GradCheckError(f"non-finite loss when perturbing coordinate {i} ({_locate(params, i)})", coordinate=i)
        out[i] = (f_plus - f_minus) / (2 * h)
    return out


def grad_check(loss_and_grad: LossAndGrad, params: ParamVector, h: float = STEP) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is ``|a - n| / max(1, |a| + |n|)``. A vector with
    no coordinates passes vacuously with error 0.
    """
    if params.size == 0:
        return 0.0
    loss, grad = loss_and_grad(params)
    if not math.isfinite(loss):
        raise GradCheckError("non-finite loss at the unperturbed point")
    analytic = grad.flatten()
    numeric = numeric_gradient(loss_and_grad, params, h)
    return float(relative_error(analytic, numeric).max())


def _locate(params: ParamVector, i: int) -> str:
    offset = 0
    for name, arr in params:
        if i < offset + arr.size:
            where = ", ".join(str(int(j)) for j in np.unravel_index(i - offset, arr.shape))
            return f"{name}[{where}]"
        offset += arr.size
    return "?"
