"""Round scheduler: sampling, broadcast, parallel client work, aggregation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fedsim.errors import ParameterError, RoundError, StructuralError
from fedsim.fedcore.client import ClientState, LocalPlan, client_update, personal_update
from fedsim.fedcore.strategy import (
    FedKd,
    Fedr,
    Strategy,
    base_strategy,
    blend_delta,
    downloads_per_round,
    history_capacity,
)
from fedsim.models import Model, build_model
from fedsim.tensor import ParamVector

# stream tags mixed into per-(seed, round, client) RNG keys
_SAMPLE, _LOCAL, _PERSONAL, _INIT = 1, 2, 3, 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; order of use never matters."""
    return np.random.default_rng([seed, *key])


@dataclass
class GlobalState:
    """Server state between rounds.

    ``blended_delta`` is the delta broadcast in the most recent round (the
    zero vector before the first). ``history`` holds raw deltas
    ``w^{t+1} - w^t``, newest first, at most ``capacity`` of them.
    """

    round: int
    weights: ParamVector
    blended_delta: ParamVector
    history: tuple[ParamVector, ...] = ()
    capacity: int = 1

    def __post_init__(self):
        self.weights.check_congruent(self.blended_delta, "delta")
        if not 1 <= self.capacity <= 4:
            raise StructuralError(f"delta history capacity must be 1..4, got {self.capacity}")
        if len(self.history) > self.capacity:
            raise StructuralError(f"{len(self.history)} deltas exceed capacity {self.capacity}")
        for delta in self.history:
            self.weights.check_congruent(delta, "delta history")

    @classmethod
    def initial(cls, weights: ParamVector, capacity: int = 1) -> "GlobalState":
        return cls(0, weights.copy(), weights.zeros_like(), (), capacity)


@dataclass
class ClientReport:
    client_id: int
    num_samples: int
    train_loss: float = float("nan")
    reg_loss: float = float("nan")
    kd_loss: float = float("nan")
    bytes_uploaded: int = 0
    bytes_downloaded: int = 0
    upload_checksum: str = ""
    aborted: bool = False
    error: str = ""


@dataclass
class RoundReport:
    round: int
    sampled: list[int]
    clients: dict[int, ClientReport] = field(default_factory=dict)

    @property
    def bytes_uploaded(self) -> int:
        return sum(c.bytes_uploaded for c in self.clients.values())

    @property
    def bytes_downloaded(self) -> int:
        return sum(c.bytes_downloaded for c in self.clients.values())

    @property
    def aborted(self) -> list[int]:
        return [k for k, c in self.clients.items() if c.aborted]


def sample_size(num_clients: int, scr: float) -> int:
    return max(1, int(math.floor(scr * num_clients + 0.5)))


def sample_clients(num_clients: int, scr: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ``max(1, round(scr * K))`` ids, sorted."""
    if num_clients < 1:
        raise ParameterError(f"need at least one client, got {num_clients}")
    if not 0 < scr <= 1:
        raise ParameterError(f"sampled client ratio must lie in (0, 1], got {scr}")
    size = sample_size(num_clients, scr)
    return sorted(int(k) for k in rng.choice(num_clients, size=size, replace=False))


def aggregate(updates: Sequence[tuple[ParamVector, int]]) -> ParamVector:
    """Sample-weighted mean ``sum_k (n_k / n) w_k``, summed in the given order.

    Accumulated as ``w_0 + sum_k (n_k / n) (w_k - w_0)`` so that identical
    uploads reproduce their common value bit for bit.
    """
    if not updates:
        raise StructuralError("aggregate needs at least one update")
    template = updates[0][0]
    total = 0
    for w, n in updates:
        template.check_congruent(w, "client update")
        if n < 1:
            raise StructuralError(f"client sample count must be >= 1, got {n}")
        total += n
    base = template.flatten()
    acc = np.zeros(template.size)
    for w, n in updates:
        acc += (n / total) * (w.flatten() - base)
    return template.unflatten(base + acc)


def init_personal_models(clients: Sequence[ClientState], global_config, strategy: Strategy, seed: int) -> None:
    """Give every client a freshly initialised personal model (FedKd only)."""
    if not isinstance(strategy, FedKd):
        return
    for client in clients:
        if client.personal is None:
            config = strategy.personal_config_for(client.client_id, global_config)
            client.personal_model = build_model(config)
            client.personal = client.personal_model.init_params(stream(seed, _INIT, client.client_id))


def _client_work(
    client: ClientState,
    model: Model,
    state: GlobalState,
    delta: ParamVector,
    strategy: Strategy,
    plan: LocalPlan,
    seed: int,
):
    t, k = state.round, client.client_id
    result = client_update(model, client.data, state.weights, delta, strategy, plan, stream(seed, _LOCAL, t, k), k)
    if isinstance(strategy, FedKd) and client.personal is not None and not result.aborted:
        personal, loss, aborted = personal_update(
            client.personal_model, client.personal, model, state.weights, client.data, strategy, plan,
            stream(seed, _PERSONAL, t, k),
        )
        result.kd_loss = loss
        result.personal = None if aborted else personal
    return result


def run_round(
    state: GlobalState,
    clients: Sequence[ClientState],
    model: Model,
    strategy: Strategy,
    plan: LocalPlan,
    scr: float,
    seed: int,
    threads: int = 1,
) -> tuple[GlobalState, RoundReport]:
    """One communication round.

    Blends the delta from raw deltas of earlier rounds, samples clients,
    runs their local updates (concurrently when ``threads > 1``), aggregates
    the surviving uploads in ascending client order and records the new raw
    delta. The outcome depends only on ``seed`` and the inputs, never on
    ``threads``.
    """
    inner = base_strategy(strategy)
    if isinstance(inner, Fedr):
        delta = blend_delta(state.history, inner.delta_mode, state.blended_delta)
    else:
        delta = state.blended_delta.zeros_like()
    sampled = sample_clients(len(clients), scr, stream(seed, _SAMPLE, state.round))
    chosen = [clients[k] for k in sampled]

    def work(client: ClientState):
        return _client_work(client, model, state, delta, strategy, plan, seed)

    if threads > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chosen))
    else:
        results = [work(c) for c in chosen]

    report = RoundReport(state.round, sampled)
    download = downloads_per_round(strategy) * state.weights.nbytes
    survivors = []
    for client, result in zip(chosen, results):
        k = client.client_id
        entry = ClientReport(
            k, client.data.num_samples, result.train_loss, result.reg_loss, result.kd_loss,
            bytes_downloaded=download, aborted=result.aborted, error=result.error,
        )
        if not result.aborted:
            entry.bytes_uploaded = result.weights.nbytes
            entry.upload_checksum = result.weights.checksum()
            client.weights = result.weights
            if result.personal is not None:
                client.personal = result.personal
            survivors.append((result.weights, client.data.num_samples))
        report.clients[k] = entry
    if not survivors:
        raise RoundError(f"round {state.round}: all {len(sampled)} sampled clients aborted")

    new_weights = aggregate(survivors)
    raw = new_weights - state.weights
    capacity = state.capacity
    history = ((raw,) + state.history)[:capacity]
    return GlobalState(state.round + 1, new_weights, delta, history, capacity), report


def initial_state(model: Model, strategy: Strategy, seed: int, weights: Optional[ParamVector] = None) -> GlobalState:
    if weights is None:
        weights = model.init_params(stream(seed, _INIT, -1 & 0xFFFFFFFF))
    return GlobalState.initial(weights, history_capacity(strategy))
