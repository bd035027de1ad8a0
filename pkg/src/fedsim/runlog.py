"""Metrics, improvement ratios, CSV persistence and run manifests."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from fedsim.errors import ConfigError, DataError, FormatError
from fedsim.models import Model, Task, task_output
from fedsim.tensor import Tensor, cross_entropy

CSV_HEADER = ("round", "client", "split", "metric", "value")
SPLITS = ("train", "test")
METRICS = ("acc", "avg_loss", "mse", "imp_ratio")
# Improvement ratio recorded in run manifests so readers know which definition produced the numbers.
IMP_RATIO_DEFINITION = "(baseline - metric) / baseline; metric = error rate (cls) or mse (reg)"

ClientId = Union[int, str]


@dataclass(frozen=True)
class MetricRecord:
    round: int
    client: ClientId
    split: str
    metric: str
    value: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        if not isinstance(self.client, int) and self.client != "global":
            raise DataError(f"client must be an int or 'global', got {self.client!r}")
        v = self.value
        if self.metric == "acc" and not 0 <= v <= 1:
            raise DataError(f"accuracy {v} outside [0, 1]")
        if self.metric in ("avg_loss", "mse") and not v >= 0:
            raise DataError(f"{self.metric} {v} must be >= 0")


# ---------------------------------------------------------------------------
# metrics


def improvement_ratio(baseline: float, metric: float) -> float:
    """Relative gain over an isolated-training baseline: ``(b - m) / b``."""
    if not baseline > 0:
        raise ConfigError(f"baseline must be > 0, got {baseline}", "baseline")
    return (baseline - metric) / baseline


def error_metric(metrics: Mapping[str, float]) -> float:
    """The quantity baselines are expressed in: error rate or MSE."""
    return 1.0 - metrics["acc"] if "acc" in metrics else metrics["mse"]


def predict(model: Model, params, inputs) -> Tensor:
    return model.forward({name: Tensor(arr) for name, arr in params}, inputs)


def evaluate(model: Model, params, dataset, task: Task, idx: np.ndarray | None = None) -> dict[str, float]:
    """Classification gives ``acc`` and ``avg_loss`` (cross-entropy); regression ``mse``."""
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise DataError("cannot evaluate on an empty set")
    out = task_output(predict(model, params, dataset.inputs(idx)), task)
    targets = dataset.targets[idx]
    if task.kind == "cls":
        labels = targets.astype(np.int64)
        acc = float(np.mean(np.argmax(out.data, axis=1) == labels))
        return {"acc": acc, "avg_loss": cross_entropy(out, labels).item()}
    err = out.data - targets
    return {"mse": float(np.mean(err * err))}


def records_for(round_: int, client: ClientId, split: str, metrics: Mapping[str, float]) -> list[MetricRecord]:
    return [MetricRecord(round_, client, split, name, value) for name, value in metrics.items()]


# ---------------------------------------------------------------------------
# baselines


def load_baselines(path) -> dict[int, float]:
    """Read ``client,baseline`` rows; every baseline must be positive."""
    out = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["client", "baseline"]:
        raise FormatError(f"{path}: expected header 'client,baseline'")
    for line, row in enumerate(rows[1:], start=2):
        try:
            client, value = int(row[0]), float(row[1])
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{line}: malformed row {row!r}") from None
        if not value > 0:
            raise ConfigError(f"client {client} baseline must be > 0, got {value}", "baseline")
        out[client] = value
    return out


# ---------------------------------------------------------------------------
# persistence


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb" if isinstance(data, bytes) else "w", newline="" if isinstance(data, str) else None) as fh:
        fh.write(data)
    os.replace(tmp, path)


def format_value(value: float) -> str:
    return f"{value:.9g}"


def records_to_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([r.round, r.client, r.split, r.metric, format_value(r.value)])
    return buf.getvalue()


def write_csv(records: Iterable[MetricRecord], path) -> None:
    atomic_write(path, records_to_csv(records))


def read_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise FormatError(f"{path}:{line}: expected 5 fields, got {len(row)}")
        try:
            client: ClientId = row[1] if row[1] == "global" else int(row[1])
            out.append(MetricRecord(int(row[0]), client, row[2], row[3], float(row[4])))
        except (ValueError, DataError) as exc:
            raise FormatError(f"{path}:{line}: {exc}") from None
    return out


def format_manifest(entries: Mapping[str, object]) -> str:
    return "".join(f"{key}={value}\n" for key, value in entries.items())


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# summaries


def series(records: Sequence[MetricRecord], metric: str, client: ClientId = "global", split: str = "test") -> list[tuple[int, float]]:
    return sorted((r.round, r.value) for r in records if r.metric == metric and r.client == client and r.split == split)


def convergence_round(points: Sequence[tuple[int, float]], fraction: float = 0.95) -> int:
    """First round whose value reaches ``fraction`` of the final value."""
    if not points:
        raise DataError("no points to summarise")
    final = points[-1][1]
    for round_, value in points:
        if value >= fraction * final:
            return round_
    return points[-1][0]


def mean_of_last(points: Sequence[tuple[int, float]], count: int) -> float:
    tail = [v for _, v in points[-count:]]
    return math.fsum(tail) / len(tail)
