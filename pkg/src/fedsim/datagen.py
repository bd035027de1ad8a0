"""Synthetic datasets, client partitioners and IDX ingestion.

Partitioners cover the non-IID regimes used in the experiments: IID splits,
label-distribution skew (per-class Dirichlet splitting) and feature skew
(client-specific offsets added to the features). All generators are pure
functions of their arguments and seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np

from fedsim.errors import ConfigError, DataError, FormatError, PartitionError
from fedsim.models import Graph, GraphBatch

GRAPH_RULES = ("count_nodes", "max_feature", "triangle_presence")
REPAIR_ATTEMPTS = 100


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ArrayDataset:
    """Feature matrix with one target per row (class index or real)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"features {self.x.shape} and targets {self.y.shape} disagree")

    def __len__(self) -> int:
        return self.x.shape[0]

    def inputs(self, idx) -> np.ndarray:
        return self.x[idx]

    @property
    def targets(self) -> np.ndarray:
        return self.y

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.x[idx], self.y[idx])


@dataclass
class GraphDataset:
    graphs: list[Graph]

    def __len__(self) -> int:
        return len(self.graphs)

    def inputs(self, idx) -> GraphBatch:
        return GraphBatch.from_graphs([self.graphs[i] for i in np.asarray(idx).reshape(-1)])

    @property
    def targets(self) -> np.ndarray:
        return np.array([g.target for g in self.graphs], dtype=np.float64)

    def subset(self, idx) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in np.asarray(idx).reshape(-1)])


Dataset = Union[ArrayDataset, GraphDataset]


# ---------------------------------------------------------------------------
# partitions


@dataclass
class Partition:
    """Client id -> sorted sample indices; a set partition of ``[0, N)``."""

    assignments: dict[int, np.ndarray]
    num_clients: int

    def __post_init__(self):
        self.assignments = {
            k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in sorted(self.assignments.items())
        }

    @property
    def num_samples(self) -> int:
        return sum(v.size for v in self.assignments.values())

    def sizes(self) -> list[int]:
        return [self.assignments[k].size for k in range(self.num_clients)]

    def owner(self) -> np.ndarray:
        """Array mapping sample index to client id."""
        out = np.full(self.num_samples, -1, dtype=np.int64)
        for k, idx in self.assignments.items():
            out[idx] = k
        return out

    def validate(self, n: int | None = None) -> None:
        """Raise ``PartitionError`` unless disjoint, covering and non-empty."""
        n = self.num_samples if n is None else n
        if sorted(self.assignments) != list(range(self.num_clients)):
            raise PartitionError(f"client ids {sorted(self.assignments)} are not 0..{self.num_clients - 1}")
        seen = np.zeros(n, dtype=np.int64)
        for k, idx in self.assignments.items():
            if idx.size == 0:
                raise PartitionError(f"client {k} has no samples")
            if idx.min() < 0 or idx.max() >= n:
                raise PartitionError(f"client {k} holds indices outside [0, {n})")
            np.add.at(seen, idx, 1)
        if np.any(seen != 1):
            bad = int(np.flatnonzero(seen != 1)[0])
            raise PartitionError(f"index {bad} assigned {seen[bad]} times")


@dataclass(frozen=True)
class DirichletParams:
    alpha: float
    num_clients: int
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"must be > 0, got {self.alpha}", "partition.alpha")
        if self.num_clients < 1:
            raise ConfigError("must be >= 1", "partition.num_clients")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")


def iid_partition(n: int, num_clients: int, seed: int) -> Partition:
    """Shuffle then cut into near-equal chunks; earlier clients take the remainder."""
    if num_clients < 1 or n < num_clients:
        raise PartitionError(f"cannot give {num_clients} clients at least one of {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, num_clients)
    sizes = [base + (1 if k < extra else 0) for k in range(num_clients)]
    cuts = np.cumsum(sizes)[:-1]
    return Partition(dict(enumerate(np.split(order, cuts))), num_clients)


def lda_partition(labels: Sequence[int], params: DirichletParams) -> Partition:
    """Per-class Dirichlet split of sample indices across clients.

    RNG stream (``numpy.random.default_rng(seed)``), per attempt: for each
    class ``c`` in ascending order take that class's indices in ascending
    order, ``rng.permutation`` them, draw ``rng.dirichlet([alpha] * K)``, cut
    at ``floor(cumsum(p) * n_c)`` and hand piece ``k`` to client ``k``.
    Attempts repeat (continuing the same stream) until every client holds a
    sample, at most ``REPAIR_ATTEMPTS`` times.
    """
    labels = np.asarray(labels)
    n, k = labels.size, params.num_clients
    if n < k:
        raise DataError(f"{n} samples cannot cover {k} clients")
    classes = np.unique(labels)
    if classes.size == 0:
        raise DataError("no samples to partition")
    if labels.dtype.kind in "iu" and classes.size != classes.max() + 1:
        empty = sorted(set(range(int(classes.max()) + 1)) - set(classes.tolist()))
        raise DataError(f"class {empty[0]} has no samples")
    per_class = [np.flatnonzero(labels == c) for c in classes]
    rng = np.random.default_rng(params.seed)
    for _ in range(REPAIR_ATTEMPTS):
        buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
        for idx in per_class:
            shuffled = rng.permutation(idx)
            proportions = rng.dirichlet(np.full(k, params.alpha))
            cuts = (np.cumsum(proportions) * idx.size).astype(np.int64)[:-1]
            for client, piece in enumerate(np.split(shuffled, cuts)):
                buckets[client].append(piece)
        merged = {c: np.concatenate(pieces) for c, pieces in enumerate(buckets)}
        if min(v.size for v in merged.values()) >= 1:
            return Partition(merged, k)
    raise PartitionError(
        f"no Dirichlet(alpha={params.alpha}) draw gave all {k} clients a sample in {REPAIR_ATTEMPTS} attempts"
    )


def contiguous_partition(sizes: Sequence[int]) -> Partition:
    """Client ``k`` owns the ``k``-th consecutive block (per-client rosters)."""
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return Partition({k: np.arange(bounds[k], bounds[k + 1]) for k in range(len(sizes))}, len(sizes))


def label_histograms(labels: Sequence[int], partition: Partition, num_classes: int) -> np.ndarray:
    """``K x C`` matrix of per-client class counts."""
    labels = np.asarray(labels, dtype=np.int64)
    hist = np.zeros((partition.num_clients, num_classes), dtype=np.int64)
    for k, idx in partition.assignments.items():
        hist[k] = np.bincount(labels[idx], minlength=num_classes)
    return hist


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def mean_label_skew(labels: Sequence[int], partition: Partition, num_classes: int) -> float:
    """Mean total-variation distance between client and global label histograms."""
    hist = label_histograms(labels, partition, num_classes)
    glob = hist.sum(axis=0) / hist.sum()
    return float(np.mean([tv_distance(h / h.sum(), glob) for h in hist]))


def feature_shift_offsets(num_clients: int, dim: int, scale: float, seed: int) -> np.ndarray:
    """One Gaussian offset vector (std ``scale``) per client."""
    if scale < 0:
        raise ConfigError("must be >= 0", "dataset.feature_shift")
    return np.random.default_rng([seed, 0xFEA7]).normal(0.0, scale, size=(num_clients, dim))


def apply_feature_shift(x: np.ndarray, partition: Partition, offsets: np.ndarray) -> np.ndarray:
    shifted = np.array(x, dtype=np.float64, copy=True)
    for k, idx in partition.assignments.items():
        shifted[idx] += offsets[k]
    return shifted


# ---------------------------------------------------------------------------
# gaussian blobs


@dataclass(frozen=True)
class BlobSpec:
    """Class-conditional isotropic Gaussians.

    ``margin`` is the distance from every class mean to the hyperplane
    bisecting it and any other mean, in units of ``noise`` (the per-feature
    standard deviation). Means lie on orthogonal directions when
    ``num_classes <= num_features``.
    """

    num_classes: int = 4
    num_features: int = 16
    margin: float = 1.0
    noise: float = 1.0
    per_client_feature_shift: float = 0.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes", "dataset.num_classes")
        if self.num_features < 1:
            raise ConfigError("must be >= 1", "dataset.num_features")
        if self.margin < 0:
            raise ConfigError("must be >= 0", "dataset.margin")
        if not self.noise > 0:
            raise ConfigError("must be > 0", "dataset.noise")
        if self.per_client_feature_shift < 0:
            raise ConfigError("must be >= 0", "dataset.feature_shift")


def blob_means(spec: BlobSpec, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(size=(spec.num_features, spec.num_classes))
    if spec.num_classes <= spec.num_features:
        directions, _ = np.linalg.qr(raw)
    else:
        directions = raw / np.linalg.norm(raw, axis=0, keepdims=True)
    return (np.sqrt(2.0) * spec.margin * spec.noise) * directions.T


def make_blobs(spec: BlobSpec, n: int, seed: int) -> ArrayDataset:
    """Balanced labelled sample of ``n`` points (labels cycle then shuffle)."""
    if n < spec.num_classes:
        raise DataError(f"need n >= {spec.num_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    means = blob_means(spec, rng)
    y = rng.permutation(np.arange(n) % spec.num_classes)
    x = means[y] + spec.noise * rng.normal(size=(n, spec.num_features))
    return ArrayDataset(x, y.astype(np.int64))


# ---------------------------------------------------------------------------
# graph tasks


@dataclass(frozen=True)
class GraphTaskSpec:
    """Random Erdos-Renyi graphs labelled by a structural rule.

    ``count_nodes`` and ``max_feature`` (max of node feature 0) are
    regression targets; ``triangle_presence`` is a balanced binary label.
    Node features are Exponential(0.5) draws; ``feature_offset`` shifts
    every one of them (feature skew between clients).
    """

    rule: Literal["count_nodes", "max_feature", "triangle_presence"] = "count_nodes"
    min_nodes: int = 3
    max_nodes: int = 12
    edge_prob: float = 0.3
    num_features: int = 3
    feature_offset: float = 0.0

    def __post_init__(self):
        if self.rule not in GRAPH_RULES:
            raise ConfigError(f"unknown rule {self.rule!r}; choose from {GRAPH_RULES}", "dataset.rule")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ConfigError("need 1 <= min_nodes <= max_nodes", "dataset.min_nodes")
        if not 0 <= self.edge_prob <= 1:
            raise ConfigError("must lie in [0, 1]", "dataset.edge_prob")
        if self.num_features < 1:
            raise ConfigError("must be >= 1", "dataset.num_features")

    @property
    def task_kind(self) -> str:
        return "cls" if self.rule == "triangle_presence" else "reg"


def has_triangle(num_nodes: int, edges: np.ndarray) -> bool:
    adj = np.zeros((num_nodes, num_nodes), dtype=np.int64)
    if len(edges):
        adj[edges[:, 0], edges[:, 1]] = 1
        adj[edges[:, 1], edges[:, 0]] = 1
    np.fill_diagonal(adj, 0)
    return bool(np.trace(adj @ adj @ adj) > 0)


FEATURE_SCALE = 0.5


def graph_target(graph: Graph, rule: str) -> float:
    if rule == "count_nodes":
        return float(graph.num_nodes)
    if rule == "max_feature":
        return float(graph.node_features[:, 0].max())
    if rule == "triangle_presence":
        return 1.0 if has_triangle(graph.num_nodes, graph.edges) else 0.0
    raise ConfigError(f"unknown rule {rule!r}; choose from {GRAPH_RULES}", "dataset.rule")


def _random_graph(spec: GraphTaskSpec, rng: np.random.Generator) -> Graph:
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < spec.edge_prob
    pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    # heavy-tailed so the maximum node feature varies a lot between graphs
    features = rng.exponential(FEATURE_SCALE, (n, spec.num_features)) + spec.feature_offset
    return Graph.undirected(features, pairs)


def make_graph_tasks(spec: GraphTaskSpec, n: int, seed: int, max_tries: int = 200) -> GraphDataset:
    """``n`` labelled graphs. Triangle labels alternate 0/1 by rejection sampling."""
    if n < 1:
        raise DataError("need at least one graph")
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(n):
        graph = _random_graph(spec, rng)
        if spec.rule == "triangle_presence":
            wanted = float(i % 2)
            for _ in range(max_tries):
                if graph_target(graph, spec.rule) == wanted:
                    break
                graph = _random_graph(spec, rng)
        graph.target = graph_target(graph, spec.rule)
        graphs.append(graph)
    return GraphDataset(graphs)


@dataclass(frozen=True)
class RosterEntry:
    """One client of a heterogeneous graph federation."""

    task: GraphTaskSpec
    num_graphs: int


def default_graph_roster() -> list[RosterEntry]:
    """Thirteen clients: eight triangle classifiers, five regressors.

    Classification clients differ in graph size, density and feature offset;
    regression clients alternate between counting nodes and reading the
    maximum node feature.
    """
    cls = [
        RosterEntry(GraphTaskSpec("triangle_presence", lo, hi, p, 3, off), size)
        for lo, hi, p, off, size in [
            (4, 10, 0.25, 0.0, 150),
            (4, 10, 0.25, 0.5, 100),
            (5, 12, 0.20, 0.0, 200),
            (3, 8, 0.35, 0.2, 100),
            (5, 12, 0.20, 0.8, 100),
            (4, 10, 0.30, 0.0, 175),
            (6, 14, 0.15, 0.3, 200),
            (4, 9, 0.30, 0.6, 125),
        ]
    ]
    reg = [
        RosterEntry(GraphTaskSpec(rule, lo, hi, p, 3, 0.0), size)
        for rule, lo, hi, p, size in [
            ("count_nodes", 3, 12, 0.3, 200),
            ("max_feature", 3, 12, 0.1, 200),
            ("count_nodes", 4, 14, 0.2, 150),
            ("max_feature", 4, 10, 0.15, 150),
            ("count_nodes", 3, 10, 0.4, 125),
        ]
    ]
    return cls + reg


# ---------------------------------------------------------------------------
# IDX files

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(blob)} bytes)")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}, need {header_end} bytes")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    need = header_end + int(np.prod(dims))
    if len(blob) < need:
        raise FormatError(f"{path}: truncated data at byte offset {len(blob)}, expected {need} bytes")
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} unexpected trailing bytes at byte offset {need}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header_end).reshape(dims)


def idx_load(images_path, labels_path) -> ArrayDataset:
    """Read an MNIST-style image/label IDX pair; pixels are scaled by 1/255."""
    images = _read_idx(Path(images_path), IDX_IMAGES)
    labels = _read_idx(Path(labels_path), IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return ArrayDataset(x, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`idx_load` for uint8 arrays (used to build fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES) + struct.pack(f">{images.ndim}I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">I", IDX_LABELS) + struct.pack(">I", labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV fixtures


def write_dataset_csv(dataset: ArrayDataset, path) -> None:
    """``index,f0,...,f{F-1},label`` with full float precision."""
    f = dataset.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", *(f"f{i}" for i in range(f)), "label"])
        for i, (row, label) in enumerate(zip(dataset.x, dataset.y)):
            writer.writerow([i, *(repr(float(v)) for v in row), label.item()])


def read_dataset_csv(path) -> ArrayDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "index" or rows[0][-1] != "label":
        raise FormatError(f"{path}: missing 'index,...,label' header")
    width = len(rows[0])
    xs, ys = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"{path}:{line}: expected {width} fields, got {len(row)}")
        try:
            xs.append([float(v) for v in row[1:-1]])
            label = float(row[-1])
        except ValueError as exc:
            raise FormatError(f"{path}:{line}: {exc}") from None
        ys.append(int(label) if label.is_integer() else label)
    return ArrayDataset(np.array(xs, dtype=np.float64).reshape(len(xs), width - 2), np.array(ys))


def partition_to_csv(partition: Partition) -> str:
    """``index,client`` rows in index order."""
    lines = ["index,client"]
    lines += [f"{index},{int(client)}" for index, client in enumerate(partition.owner())]
    return "\n".join(lines) + "\n"


def write_partition_csv(partition: Partition, path) -> None:
    Path(path).write_text(partition_to_csv(partition))


def read_partition_csv(path) -> Partition:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "client"]:
        raise FormatError(f"{path}: missing 'index,client' header")
    owner: dict[int, list[int]] = {}
    for line, row in enumerate(rows[1:], start=2):
        try:
            index, client = int(row[0]), int(row[1])
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{line}: malformed row {row!r}") from None
        owner.setdefault(client, []).append(index)
    return Partition({k: np.array(v) for k, v in owner.items()}, len(owner))
