"""Layers and losses built on the reverse-mode engine."""

from __future__ import annotations

import numpy as np

from fedsim.errors import DataError, ParameterError, StructuralError
from fedsim.tensor.engine import Tensor, add, as_tensor, exp, log_softmax, matmul, mean, square

# Floor applied to the second KL argument wherever it would be zero.
KL_FLOOR = 1e-12


def dense_forward(inputs, weights, bias) -> Tensor:
    """Affine layer ``inputs @ weights + bias`` broadcast over the batch."""
    inputs, weights, bias = as_tensor(inputs), as_tensor(weights), as_tensor(bias)
    if inputs.data.ndim != 2 or weights.data.ndim != 2 or inputs.shape[1] != weights.shape[0]:
        raise StructuralError(f"dense_forward: input shape {inputs.shape} incompatible with weights shape {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise StructuralError(f"dense_forward: bias shape {bias.shape} incompatible with weights shape {weights.shape}")
    return add(matmul(inputs, weights), bias)


def softmax_with_temperature(logits, tau: float = 1.0) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[-1] < 1:
        raise StructuralError(f"softmax needs at least one logit, got shape {logits.shape}")
    return exp(log_softmax(logits, tau))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise StructuralError(f"cross_entropy expects batch x classes logits, got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise StructuralError(f"cross_entropy: {labels.shape} labels for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes or not np.all(labels == np.floor(labels))):
        raise DataError(f"labels must be integers in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    out = Tensor(np.array(-log_probs[rows, labels].mean()), _parents=(logits,))

    def _backward(g: np.ndarray) -> None:
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        logits._accumulate(d * (g / batch))

    out._backward = _backward if out.requires_grad else None
    return out


def kl_divergence(p, q) -> Tensor:
    """``KL(p || q) = sum p_i ln(p_i / q_i)``, averaged over rows for 2-D input.

    Entries of ``q`` below ``KL_FLOOR`` are clamped to it; entries with
    ``p_i == 0`` contribute nothing.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.data.ndim not in (1, 2):
        raise StructuralError(f"kl_divergence: shapes {p.shape} and {q.shape} must match and be 1-D or 2-D")
    rows = 1 if p.data.ndim == 1 else p.shape[0]
    q_clamped = np.maximum(q.data, KL_FLOOR)
    positive = p.data > 0
    safe_p = np.where(positive, p.data, 1.0)
    log_ratio = np.log(safe_p) - np.log(q_clamped)
    terms = np.where(positive, p.data * log_ratio, 0.0)
    out = Tensor(np.array(terms.sum() / rows), _parents=(p, q))

    def _backward(g: np.ndarray) -> None:
        scale = g / rows
        if p.requires_grad:
            p._accumulate(np.where(positive, log_ratio + 1.0, 0.0) * scale)
        if q.requires_grad:
            q._accumulate(np.where(q.data >= KL_FLOOR, -p.data / q_clamped, 0.0) * scale)

    out._backward = _backward if out.requires_grad else None
    return out


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise StructuralError(f"mse: prediction shape {pred.shape} vs target shape {target.shape}")
    return mean(square(add(pred, -target)))
