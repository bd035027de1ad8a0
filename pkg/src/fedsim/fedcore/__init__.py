"""Federation engine: strategies, client updates, rounds, checkpoints."""

from fedsim.fedcore.checkpoint import load_checkpoint, save_checkpoint
from fedsim.fedcore.client import (
    ClientData,
    ClientState,
    LocalPlan,
    LocalResult,
    client_update,
    kd_local_step,
    personal_update,
)
from fedsim.fedcore.server import (
    ClientReport,
    GlobalState,
    RoundReport,
    aggregate,
    init_personal_models,
    initial_state,
    run_round,
    sample_clients,
    sample_size,
    stream,
)
from fedsim.fedcore.strategy import (
    FedAvg,
    FedKd,
    FedProx,
    Fedr,
    OptionI,
    OptionII,
    Strategy,
    base_strategy,
    blend_delta,
    downloads_per_round,
    prox_penalty,
    reg_penalty,
    strategy_digest,
)

__all__ = [
    "ClientData",
    "ClientReport",
    "ClientState",
    "FedAvg",
    "FedKd",
    "FedProx",
    "Fedr",
    "GlobalState",
    "LocalPlan",
    "LocalResult",
    "OptionI",
    "OptionII",
    "RoundReport",
    "Strategy",
    "aggregate",
    "base_strategy",
    "blend_delta",
    "client_update",
    "downloads_per_round",
    "init_personal_models",
    "initial_state",
    "kd_local_step",
    "load_checkpoint",
    "personal_update",
    "prox_penalty",
    "reg_penalty",
    "run_round",
    "sample_clients",
    "sample_size",
    "save_checkpoint",
    "strategy_digest",
    "stream",
]
