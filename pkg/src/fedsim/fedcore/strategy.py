"""Strategy configurations and the server/client-side vector algebra.

The delta-regularized strategy (``Fedr``) keeps a short history of global
model deltas on the server, blends them into a single direction and sends it
to clients together with the weights. Clients then penalize only those
coordinates whose local movement opposes that direction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from fedsim.errors import ConfigError
from fedsim.tensor import ParamVector

COEFF_TOLERANCE = 1e-12
MAX_HISTORY = 4


@dataclass(frozen=True)
class OptionI:
    """Weighted average of the latest ``len(coeffs)`` raw deltas, newest first."""

    coeffs: tuple[float, ...] = (0.2, 0.3, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if not 1 <= len(self.coeffs) <= MAX_HISTORY:
            raise ConfigError(f"need 1 to {MAX_HISTORY} coefficients, got {len(self.coeffs)}", "strategy.fedr.coeffs")
        if abs(math.fsum(self.coeffs) - 1.0) > COEFF_TOLERANCE:
            raise ConfigError(f"coefficients must sum to 1, got {math.fsum(self.coeffs)!r}", "strategy.fedr.coeffs")

    @property
    def capacity(self) -> int:
        return len(self.coeffs)


@dataclass(frozen=True)
class OptionII:
    """Exponential moving average with decay factor ``a``."""

    a: float = 0.5

    def __post_init__(self):
        if not 0 < self.a < 1:
            raise ConfigError(f"decay factor must lie in (0, 1), got {self.a}", "strategy.fedr.a")

    @property
    def capacity(self) -> int:
        return 1


DeltaMode = Union[OptionI, OptionII]


def _check_mu(mu: float, path: str) -> None:
    if not (mu >= 0 and math.isfinite(mu)):
        raise ConfigError(f"must be a finite value >= 0, got {mu}", path)


def _check_overrides(overrides, path: str) -> tuple[tuple[int, float], ...]:
    items = tuple(sorted((int(k), float(v)) for k, v in dict(overrides).items()))
    for _, mu in items:
        _check_mu(mu, path)
    return items


@dataclass(frozen=True)
class FedAvg:
    name = "fedavg"


@dataclass(frozen=True)
class FedProx:
    mu: float = 0.01
    mu_overrides: tuple[tuple[int, float], ...] = ()
    name = "fedprox"

    def __post_init__(self):
        _check_mu(self.mu, "strategy.fedprox.mu")
        object.__setattr__(self, "mu_overrides", _check_overrides(self.mu_overrides, "strategy.mu_overrides"))

    def mu_for(self, client: int) -> float:
        return dict(self.mu_overrides).get(client, self.mu)


@dataclass(frozen=True)
class Fedr:
    mu: float = 0.1
    delta_mode: DeltaMode = field(default_factory=OptionII)
    mu_overrides: tuple[tuple[int, float], ...] = ()
    name = "fedr"

    def __post_init__(self):
        _check_mu(self.mu, "strategy.fedr.mu")
        if not isinstance(self.delta_mode, (OptionI, OptionII)):
            raise ConfigError(f"unknown delta mode {self.delta_mode!r}", "strategy.fedr.option")
        object.__setattr__(self, "mu_overrides", _check_overrides(self.mu_overrides, "strategy.mu_overrides"))

    def mu_for(self, client: int) -> float:
        return dict(self.mu_overrides).get(client, self.mu)


InnerStrategy = Union[FedAvg, FedProx, Fedr]


@dataclass(frozen=True)
class FedKd:
    """An inner strategy for the shared model plus per-client distilled models.

    ``personal_models`` optionally maps client ids to model configs; clients
    not listed use ``personal_model`` or, when that is ``None``, the global
    architecture.
    """

    inner: InnerStrategy = field(default_factory=FedAvg)
    alpha: float = 0.5
    temperature: float = 10.0
    personal_model: Optional[object] = None
    personal_models: tuple[tuple[int, object], ...] = ()
    name = "fedkd"

    def __post_init__(self):
        if not isinstance(self.inner, (FedAvg, FedProx, Fedr)):
            raise ConfigError("inner strategy must be fedavg, fedprox or fedr", "strategy.fedkd.inner")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.alpha}", "strategy.fedkd.alpha")
        if not self.temperature > 0:
            raise ConfigError(f"must be > 0, got {self.temperature}", "strategy.fedkd.temperature")
        object.__setattr__(self, "personal_models", tuple(sorted(dict(self.personal_models).items())))

    def personal_config_for(self, client: int, default):
        return dict(self.personal_models).get(client, self.personal_model or default)


Strategy = Union[FedAvg, FedProx, Fedr, FedKd]


def base_strategy(strategy: Strategy) -> InnerStrategy:
    """The strategy that drives shared-model training."""
    return strategy.inner if isinstance(strategy, FedKd) else strategy


def history_capacity(strategy: Strategy) -> int:
    inner = base_strategy(strategy)
    return inner.delta_mode.capacity if isinstance(inner, Fedr) else 1


def downloads_per_round(strategy: Strategy) -> int:
    """Number of ParamVectors a sampled client receives (weights, plus delta for Fedr)."""
    return 2 if isinstance(base_strategy(strategy), Fedr) else 1


def strategy_digest(strategy: Strategy) -> str:
    return hashlib.sha256(repr(strategy).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# server side: delta blending


def blend_delta(history: Sequence[ParamVector], mode: DeltaMode, prev_blended: ParamVector) -> ParamVector:
    """Blend raw global deltas (``history[0]`` newest) into the broadcast delta.

    Option I returns ``sum_i coeffs[i] * history[i]`` with absent entries
    counted as zero. Option II returns ``(1 - a) * prev_blended + a *
    history[0]``, or ``prev_blended`` unchanged when no delta exists yet.
    """
    if isinstance(mode, OptionI):
        acc = np.zeros(prev_blended.size)
        for coeff, delta in zip(mode.coeffs, history):
            prev_blended.check_congruent(delta, "delta history")
            acc += coeff * delta.flatten()
        return prev_blended.unflatten(acc)
    if isinstance(mode, OptionII):
        if not history:
            return prev_blended.copy()
        prev_blended.check_congruent(history[0], "delta history")
        return prev_blended.unflatten((1.0 - mode.a) * prev_blended.flatten() + mode.a * history[0].flatten())
    raise ConfigError(f"unknown delta mode {mode!r}", "strategy.fedr.option")


# ---------------------------------------------------------------------------
# client side: penalties on flat vectors


def reg_penalty_flat(w_k: np.ndarray, w_t: np.ndarray, delta: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    moved = w_k - w_t
    active = moved * delta < 0
    residual = np.where(active, moved - delta, 0.0)
    return 0.5 * mu * float(np.dot(residual, residual)), mu * residual


def prox_penalty_flat(w_k: np.ndarray, w_t: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    moved = w_k - w_t
    return 0.5 * mu * float(np.dot(moved, moved)), mu * moved


def reg_penalty(w_k: ParamVector, w_t: ParamVector, delta: ParamVector, mu: float) -> tuple[float, ParamVector]:
    """Filtered L2 pull of local weights toward ``w_t + delta``.

    Coordinate ``j`` is penalized only when the local move ``(w_k - w_t)_j``
    has the opposite sign to ``delta_j``; there the residual is
    ``r_j = (w_k - w_t - delta)_j``. Returns ``(mu / 2) * sum r_j**2`` and the
    gradient ``mu * r`` (zero on unpenalized coordinates). The mask is
    re-evaluated on every call and treated as constant when differentiating.
    """
    w_k.check_congruent(w_t)
    w_k.check_congruent(delta, "delta")
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}", "strategy.fedr.mu")
    value, grad = reg_penalty_flat(w_k.flatten(), w_t.flatten(), delta.flatten(), mu)
    return value, w_k.unflatten(grad)


def prox_penalty(w_k: ParamVector, w_t: ParamVector, mu: float) -> tuple[float, ParamVector]:
    """FedProx term ``(mu / 2) * ||w_k - w_t||^2`` and its gradient."""
    w_k.check_congruent(w_t)
    value, grad = prox_penalty_flat(w_k.flatten(), w_t.flatten(), mu)
    return value, w_k.unflatten(grad)
