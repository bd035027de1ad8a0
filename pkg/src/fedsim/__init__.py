"""Deterministic federated-learning simulator.

Strategies: FedAvg, FedProx, model-delta regularization (``Fedr``) and
federated knowledge distillation (``FedKd``) over a small numpy autodiff
engine, with MLP and GIN models and synthetic non-IID client data.
"""

from fedsim.config import ExperimentConfig, build_config, load_config
from fedsim.experiment import Simulation, run_experiment

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "Simulation", "build_config", "load_config", "run_experiment"]
