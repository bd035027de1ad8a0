"""Build a federation from an :class:`ExperimentConfig` and run it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from fedsim.config import ExperimentConfig
from fedsim.datagen import (
    ArrayDataset,
    BlobSpec,
    DirichletParams,
    Partition,
    apply_feature_shift,
    contiguous_partition,
    default_graph_roster,
    feature_shift_offsets,
    idx_load,
    iid_partition,
    lda_partition,
    make_blobs,
    make_graph_tasks,
)
from fedsim.errors import ConfigError
from fedsim.fedcore import (
    ClientData,
    ClientState,
    FedAvg,
    FedKd,
    GlobalState,
    LocalPlan,
    RoundReport,
    client_update,
    init_personal_models,
    initial_state,
    run_round,
    stream,
)
from fedsim.models import Model, Task, build_model
from fedsim.runlog import (
    MetricRecord,
    error_metric,
    evaluate,
    improvement_ratio,
    load_baselines,
    records_for,
)

log = logging.getLogger(__name__)

_SPLIT, _GRAPHS, _BASELINE = 5, 6, 7


def derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0])


def split_train_test(idx: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``floor(fraction * n)`` samples for testing, keeping at least one for training."""
    order = rng.permutation(idx)
    n_test = min(int(fraction * idx.size), idx.size - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


@dataclass
class Setup:
    model: Model
    model_config: object
    clients: list[ClientState]
    partition: Partition
    labels: Optional[np.ndarray] = None
    num_classes: int = 0
    pooled: Optional[tuple[object, np.ndarray, Task]] = None


def _array_setup(config: ExperimentConfig) -> tuple[ArrayDataset, int]:
    v = config.values
    if config.dataset_kind == "idx":
        data = idx_load(v["dataset.images"], v["dataset.labels"])
        if data.x.shape[1] != config.model.input_dim:
            raise ConfigError(f"images have {data.x.shape[1]} pixels, model expects {config.model.input_dim}", "dataset.images")
        return data, config.model.num_classes
    spec = BlobSpec(
        int(v["dataset.num_classes"]), int(v["dataset.num_features"]), float(v["dataset.margin"]),
        float(v["dataset.noise"]), float(v["dataset.feature_shift"]),
    )
    return make_blobs(spec, int(v["dataset.num_samples"]), config.seed), spec.num_classes


def build_setup(config: ExperimentConfig) -> Setup:
    v = config.values
    seed = config.seed
    model = build_model(config.model)
    fraction = float(v["dataset.test_fraction"])
    if config.dataset_kind == "graphs":
        roster = default_graph_roster()
        clients = []
        for k, entry in enumerate(roster):
            data = make_graph_tasks(entry.task, entry.num_graphs, derived_seed(seed, _GRAPHS, k))
            task = Task("cls", 2, 0) if entry.task.task_kind == "cls" else Task("reg", offset=2)
            train, test = split_train_test(np.arange(len(data)), fraction, stream(seed, _SPLIT, k))
            clients.append(ClientState(k, ClientData(data, train, test, task)))
        partition = contiguous_partition([len(c.data.dataset) for c in clients])
        return Setup(model, config.model, clients, partition)

    data, num_classes = _array_setup(config)
    k = int(v["partition.num_clients"])
    if config.partition_kind == "dirichlet":
        partition = lda_partition(data.y, DirichletParams(float(v["partition.alpha"]), k, seed))
    else:
        partition = iid_partition(len(data), k, seed)
    shift = float(v["dataset.feature_shift"])
    if config.partition_kind == "feature_shift":
        shift += float(v["partition.shift"])
    if shift > 0:
        offsets = feature_shift_offsets(k, data.x.shape[1], shift, seed)
        data = ArrayDataset(apply_feature_shift(data.x, partition, offsets), data.y)
    task = Task("cls", num_classes)
    clients, pooled = [], []
    for cid in range(k):
        train, test = split_train_test(partition.assignments[cid], fraction, stream(seed, _SPLIT, cid))
        clients.append(ClientState(cid, ClientData(data, train, test, task)))
        pooled.append(test)
    pooled_idx = np.sort(np.concatenate(pooled))
    return Setup(model, config.model, clients, partition, data.y, num_classes, (data, pooled_idx, task))


def isolated_baselines(setup: Setup, config: ExperimentConfig) -> dict[int, float]:
    """Error rate / MSE of a model trained on each client's data alone.

    Training budget matches a federated run: ``rounds * local_epochs`` epochs.
    Clients with an empty test split or a zero baseline get no entry.
    """
    t = config.train
    plan = LocalPlan(t.lr, t.rounds * t.local_epochs, t.batch_size, t.clip_norm)
    out = {}
    for client in setup.clients:
        k = client.client_id
        if client.data.test_idx.size == 0:
            continue
        w0 = setup.model.init_params(stream(config.seed, _BASELINE, k, 0))
        result = client_update(setup.model, client.data, w0, None, FedAvg(), plan, stream(config.seed, _BASELINE, k, 1), k)
        if result.aborted:
            log.warning("isolated baseline for client %d diverged; no improvement ratio", k)
            continue
        metrics = evaluate(setup.model, result.weights, client.data.dataset, client.data.task, client.data.test_idx)
        b = error_metric(metrics)
        if b > 0:
            out[k] = b
    return out


@dataclass
class Simulation:
    """Stateful driver: call :meth:`step` per round or :meth:`run` for all."""

    config: ExperimentConfig
    threads: int = 1
    on_round: Optional[Callable[["Simulation", RoundReport], None]] = None
    setup: Setup = field(init=False)
    state: GlobalState = field(init=False)
    records: list[MetricRecord] = field(init=False, default_factory=list)
    reports: list[RoundReport] = field(init=False, default_factory=list)
    baselines: dict[int, float] = field(init=False, default_factory=dict)

    def __post_init__(self):
        config = self.config
        self.setup = build_setup(config)
        self.state = initial_state(self.setup.model, config.strategy, config.seed)
        init_personal_models(self.setup.clients, config.model, config.strategy, config.seed)
        for client in self.setup.clients:
            if isinstance(config.strategy, FedKd) and client.personal_model.output_dim != self.setup.model.output_dim:
                raise ConfigError("personal and global models must share output columns", "strategy.fedkd.readout")
        t = config.train
        self.plan = LocalPlan(t.lr, t.local_epochs, t.batch_size, t.clip_norm)
        if config.baseline_mode == "isolated":
            self.baselines = isolated_baselines(self.setup, config)
        elif config.baseline_mode == "file":
            self.baselines = load_baselines(config.values["baseline.path"])

    def step(self) -> RoundReport:
        t = self.config.train
        self.state, report = run_round(
            self.state, self.setup.clients, self.setup.model, self.config.strategy, self.plan, t.scr,
            self.config.seed, self.threads,
        )
        self.reports.append(report)
        done = self.state.round
        if done % t.eval_every == 0 or done == t.rounds:
            self.records.extend(self.evaluate(report))
        if self.on_round is not None:
            self.on_round(self, report)
        return report

    def run(self) -> "Simulation":
        while self.state.round < self.config.train.rounds:
            self.step()
        return self

    def deployed(self, client: ClientState) -> tuple[Model, object]:
        """The model a client would serve: its personal one under FedKd."""
        if client.personal is not None:
            return client.personal_model, client.personal
        return self.setup.model, self.state.weights

    def evaluate(self, report: RoundReport) -> list[MetricRecord]:
        round_ = self.state.round
        out: list[MetricRecord] = []
        if self.setup.pooled is not None:
            data, idx, task = self.setup.pooled
            if idx.size:
                out += records_for(round_, "global", "test", evaluate(self.setup.model, self.state.weights, data, task, idx))
        trained = [c for c in report.clients.values() if not c.aborted]
        if trained:
            total = sum(c.num_samples for c in trained)
            loss = sum(c.num_samples * c.train_loss for c in trained) / total
            out.append(MetricRecord(round_, "global", "train", "avg_loss", max(loss, 0.0)))
        imps = []
        per_client: list[MetricRecord] = []
        for client in self.setup.clients:
            data = client.data
            if data.test_idx.size == 0:
                continue
            model, params = self.deployed(client)
            metrics = evaluate(model, params, data.dataset, data.task, data.test_idx)
            per_client += records_for(round_, client.client_id, "test", metrics)
            if client.client_id in self.baselines:
                imp = improvement_ratio(self.baselines[client.client_id], error_metric(metrics))
                imps.append(imp)
                per_client.append(MetricRecord(round_, client.client_id, "test", "imp_ratio", imp))
        if imps:
            out.append(MetricRecord(round_, "global", "test", "imp_ratio", float(np.mean(imps))))
        return out + per_client


def run_experiment(config: ExperimentConfig, threads: int = 1) -> Simulation:
    return Simulation(config, threads).run()
