"""Client model families: MLP / linear classifiers and a GIN graph network.

Every model exposes ``init_params(rng) -> ParamVector`` and
``forward(leaves, inputs) -> Tensor`` where ``leaves`` maps segment names to
tensors (see :meth:`ParamVector.leaves`). The module-level ``mlp_forward`` and
``gin_forward`` take a plain ``ParamVector`` for one-off evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Protocol, Sequence, Union

import numpy as np
import scipy.sparse as sp

from fedsim.errors import ConfigError, DataError, StructuralError
from fedsim.tensor import (
    ParamVector,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    dense_forward,
    index,
    mse,
    mul,
    relu,
    segment_max,
    sparse_matmul,
)

ReadoutMode = Literal["sum", "mean", "max", "mix"]
READOUT_MODES: tuple[str, ...] = ("sum", "mean", "max", "mix")
MIX_ORDER: tuple[str, ...] = ("sum", "mean", "max")


# ---------------------------------------------------------------------------
# tasks: how a model's output columns map to a loss


@dataclass(frozen=True)
class Task:
    """Which output columns a client reads and how they are scored.

    ``cls`` reads ``num_classes`` logits starting at ``offset``; ``reg`` reads
    the single column at ``offset``.
    """

    kind: Literal["cls", "reg"]
    num_classes: int = 0
    offset: int = 0

    def __post_init__(self):
        if self.kind not in ("cls", "reg"):
            raise ConfigError(f"unknown task kind {self.kind!r}", "task.kind")
        if self.kind == "cls" and self.num_classes < 2:
            raise ConfigError("classification needs at least 2 classes", "task.num_classes")

    @property
    def width(self) -> int:
        return self.num_classes if self.kind == "cls" else 1


def task_output(outputs: Tensor, task: Task) -> Tensor:
    if outputs.shape[1] < task.offset + task.width:
        raise StructuralError(f"model output width {outputs.shape[1]} too small for {task}")
    if task.kind == "cls":
        if task.offset == 0 and outputs.shape[1] == task.num_classes:
            return outputs
        return index(outputs, (slice(None), slice(task.offset, task.offset + task.num_classes)))
    return index(outputs, (slice(None), task.offset))


def task_loss(outputs: Tensor, targets: np.ndarray, task: Task) -> Tensor:
    """Cross-entropy for classification, mean squared error for regression."""
    pred = task_output(outputs, task)
    if task.kind == "cls":
        return cross_entropy(pred, targets)
    return mse(pred, targets)


# ---------------------------------------------------------------------------
# dense models


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Model(Protocol):
    output_dim: int

    def init_params(self, rng: np.random.Generator) -> ParamVector: ...

    def forward(self, leaves: Mapping[str, Tensor], inputs) -> Tensor: ...


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    num_classes: int = 2
    activation: Literal["relu"] = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", "model.input_dim")
        if not self.hidden_dims:
            raise ConfigError("an MLP needs at least one hidden layer", "model.hidden")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden widths must be >= 1", "model.hidden")
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", "model.num_classes")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}", "model.activation")


class Mlp:
    def __init__(self, config: MlpConfig):
        self.config = config
        self.output_dim = config.num_classes
        dims = (config.input_dim, *config.hidden_dims, config.num_classes)
        self._layers = list(zip(dims[:-1], dims[1:]))

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        segments = []
        for i, (fan_in, fan_out) in enumerate(self._layers):
            segments.append((f"dense{i}.w", _glorot(rng, fan_in, fan_out)))
            segments.append((f"dense{i}.b", np.zeros(fan_out)))
        return ParamVector(segments)

    def forward(self, leaves: Mapping[str, Tensor], inputs) -> Tensor:
        inputs = as_tensor(inputs)
        if inputs.data.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise StructuralError(f"MLP expects batch x {self.config.input_dim} input, got {inputs.shape}")
        h = inputs
        last = len(self._layers) - 1
        for i in range(len(self._layers)):
            h = dense_forward(h, leaves[f"dense{i}.w"], leaves[f"dense{i}.b"])
            if i < last:
                h = relu(h)
        return h


@dataclass(frozen=True)
class LinearConfig:
    """Multinomial logistic regression (no hidden layer)."""

    input_dim: int
    num_classes: int = 2

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigError("dimensions must be >= 1", "model")


class Linear:
    def __init__(self, config: LinearConfig):
        self.config = config
        self.output_dim = config.num_classes

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector(
            [
                ("dense0.w", _glorot(rng, self.config.input_dim, self.config.num_classes)),
                ("dense0.b", np.zeros(self.config.num_classes)),
            ]
        )

    def forward(self, leaves: Mapping[str, Tensor], inputs) -> Tensor:
        inputs = as_tensor(inputs)
        if inputs.data.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise StructuralError(f"linear model expects batch x {self.config.input_dim} input, got {inputs.shape}")
        return dense_forward(inputs, leaves["dense0.w"], leaves["dense0.b"])


def mlp_forward(config: MlpConfig, params: ParamVector, batch) -> Tensor:
    return Mlp(config).forward(params.leaves(), batch)


# ---------------------------------------------------------------------------
# graphs


@dataclass
class Graph:
    """Node features, directed edge list and a target (class index or real).

    Undirected graphs carry both ``(u, v)`` and ``(v, u)``.
    """

    node_features: np.ndarray
    edges: np.ndarray
    target: float = 0.0

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_features.ndim == 1:
            self.node_features = self.node_features[:, None]
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2) if len(self.edges) else np.zeros((0, 2), np.int64)
        self.edges = edges
        n = self.node_features.shape[0]
        if n < 1:
            raise DataError("a graph needs at least one node")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise StructuralError(f"edge index out of range for {n} nodes")

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @classmethod
    def undirected(cls, node_features, pairs: Sequence[tuple[int, int]], target: float = 0.0) -> "Graph":
        both = [(u, v) for u, v in pairs] + [(v, u) for u, v in pairs]
        return cls(node_features, np.array(both, dtype=np.int64).reshape(-1, 2), target)


@dataclass
class GraphBatch:
    """Several graphs stacked block-diagonally for one vectorized forward pass."""

    x: np.ndarray
    adjacency: sp.csr_matrix
    starts: np.ndarray
    counts: np.ndarray
    pool: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise DataError("cannot batch zero graphs")
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        total = int(counts.sum())
        widths = {g.node_features.shape[1] for g in graphs}
        if len(widths) != 1:
            raise StructuralError(f"graphs in a batch have differing feature widths {sorted(widths)}")
        x = np.concatenate([g.node_features for g in graphs], axis=0)
        src = np.concatenate([g.edges[:, 0] + s for g, s in zip(graphs, starts)])
        dst = np.concatenate([g.edges[:, 1] + s for g, s in zip(graphs, starts)])
        # row = receiving node, so (A @ h)[v] sums h over the in-neighbours of v
        adjacency = sp.csr_matrix((np.ones(src.size), (dst, src)), shape=(total, total))
        owner = np.repeat(np.arange(len(graphs)), counts)
        pool = sp.csr_matrix((np.ones(total), (owner, np.arange(total))), shape=(len(graphs), total))
        return cls(x, adjacency, starts, counts, pool)

    @property
    def num_graphs(self) -> int:
        return self.counts.size


def _pool(h: Tensor, batch: GraphBatch, mode: str) -> Tensor:
    if mode == "sum":
        return sparse_matmul(batch.pool, h)
    if mode == "mean":
        return mul(sparse_matmul(batch.pool, h), (1.0 / batch.counts)[:, None])
    if mode == "max":
        return segment_max(h, batch.starts)
    if mode == "mix":
        return concat([_pool(h, batch, m) for m in MIX_ORDER], axis=1)
    raise ConfigError(f"unknown readout {mode!r}; choose from {READOUT_MODES}", "model.readout")


def readout(node_embeddings, mode: ReadoutMode, batch: GraphBatch | None = None) -> Tensor:
    """Permutation-invariant graph embedding from node rows.

    With no ``batch`` the rows form one graph and a 1-D tensor of width ``d``
    (``3d`` for ``mix``) is returned; otherwise one row per graph.
    """
    h = as_tensor(node_embeddings)
    if h.data.ndim != 2:
        raise StructuralError(f"node embeddings must be num_nodes x d, got {h.shape}")
    if batch is None:
        if h.shape[0] == 0:
            raise DataError("readout of an empty graph")
        single = GraphBatch(
            h.data, sp.csr_matrix((h.shape[0], h.shape[0])), np.array([0]), np.array([h.shape[0]]),
            sp.csr_matrix(np.ones((1, h.shape[0]))),
        )
        out = _pool(h, single, mode)
        return index(out, 0)
    return _pool(h, batch, mode)


@dataclass(frozen=True)
class GinConfig:
    """GIN encoder + readout + two-layer head.

    ``head`` is ``classification`` (``num_classes`` logits), ``regression``
    (one output) or ``multitask`` (``num_classes`` logits followed by one
    regression output, for rosters mixing both task kinds).
    ``head_width_multiplier`` scales the hidden head layer (3 gives the
    widened single-pooling baselines).
    """

    input_dim: int
    num_layers: int = 2
    width: int = 64
    readout: ReadoutMode = "mean"
    head: Literal["classification", "regression", "multitask"] = "classification"
    num_classes: int = 2
    head_width_multiplier: int = 1

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", "model.input_dim")
        if self.num_layers < 1:
            raise ConfigError("must be >= 1", "model.gin.layers")
        if self.width < 1:
            raise ConfigError("must be >= 1", "model.gin.width")
        if self.readout not in READOUT_MODES:
            raise ConfigError(f"unknown readout {self.readout!r}; choose from {READOUT_MODES}", "model.readout")
        if self.head not in ("classification", "regression", "multitask"):
            raise ConfigError(f"unknown head {self.head!r}", "model.head")
        if self.head != "regression" and self.num_classes < 2:
            raise ConfigError("classification heads need >= 2 classes", "model.num_classes")
        if self.head_width_multiplier < 1:
            raise ConfigError("must be >= 1", "model.head_width_multiplier")

    @property
    def readout_width(self) -> int:
        return self.width * (3 if self.readout == "mix" else 1)

    @property
    def output_dim(self) -> int:
        return {"classification": self.num_classes, "regression": 1, "multitask": self.num_classes + 1}[self.head]


class Gin:
    def __init__(self, config: GinConfig):
        self.config = config
        self.output_dim = config.output_dim

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        c = self.config
        segments = []
        fan_in = c.input_dim
        for layer in range(c.num_layers):
            segments += [
                (f"gin{layer}.eps", np.zeros(1)),
                (f"gin{layer}.w1", _glorot(rng, fan_in, c.width)),
                (f"gin{layer}.b1", np.zeros(c.width)),
                (f"gin{layer}.w2", _glorot(rng, c.width, c.width)),
                (f"gin{layer}.b2", np.zeros(c.width)),
            ]
            fan_in = c.width
        hidden = c.width * c.head_width_multiplier
        segments += [
            ("head.w1", _glorot(rng, c.readout_width, hidden)),
            ("head.b1", np.zeros(hidden)),
            ("head.w2", _glorot(rng, hidden, c.output_dim)),
            ("head.b2", np.zeros(c.output_dim)),
        ]
        return ParamVector(segments)

    def node_embeddings(self, leaves: Mapping[str, Tensor], batch: GraphBatch) -> Tensor:
        """Node update ``h_v <- MLP((1 + eps) h_v + sum_{u in N(v)} h_u)`` per layer."""
        if batch.x.shape[1] != self.config.input_dim:
            raise StructuralError(f"GIN expects {self.config.input_dim} node features, got {batch.x.shape[1]}")
        h = Tensor(batch.x)
        for layer in range(self.config.num_layers):
            eps = leaves[f"gin{layer}.eps"]
            z = mul(h, 1.0 + eps) + sparse_matmul(batch.adjacency, h)
            z = relu(dense_forward(z, leaves[f"gin{layer}.w1"], leaves[f"gin{layer}.b1"]))
            h = relu(dense_forward(z, leaves[f"gin{layer}.w2"], leaves[f"gin{layer}.b2"]))
        return h

    def forward(self, leaves: Mapping[str, Tensor], inputs: Union[GraphBatch, Graph, Sequence[Graph]]) -> Tensor:
        batch = as_graph_batch(inputs)
        pooled = _pool(self.node_embeddings(leaves, batch), batch, self.config.readout)
        hidden = relu(dense_forward(pooled, leaves["head.w1"], leaves["head.b1"]))
        return dense_forward(hidden, leaves["head.w2"], leaves["head.b2"])


def as_graph_batch(inputs) -> GraphBatch:
    if isinstance(inputs, GraphBatch):
        return inputs
    if isinstance(inputs, Graph):
        return GraphBatch.from_graphs([inputs])
    return GraphBatch.from_graphs(list(inputs))


def gin_forward(config: GinConfig, params: ParamVector, graph) -> Tensor:
    """Prediction for one graph (1-D) or for a batch (one row per graph)."""
    out = Gin(config).forward(params.leaves(), graph)
    return index(out, 0) if isinstance(graph, Graph) else out


ModelConfig = Union[MlpConfig, LinearConfig, GinConfig]


def build_model(config: ModelConfig) -> Model:
    if isinstance(config, MlpConfig):
        return Mlp(config)
    if isinstance(config, LinearConfig):
        return Linear(config)
    if isinstance(config, GinConfig):
        return Gin(config)
    raise ConfigError(f"unsupported model config {type(config).__name__}", "model")
