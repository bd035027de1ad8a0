"""Experiment configuration: flat ``dotted.key = value`` text files.

Blank lines and ``#`` comments are ignored. Every key must be one of
``DEFAULTS``; values are validated when the typed :class:`ExperimentConfig`
is built and errors name the offending dotted path. Keys whose default is
``auto`` are resolved from the dataset kind.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from fedsim.errors import ConfigError
from fedsim.fedcore.strategy import FedAvg, FedKd, FedProx, Fedr, OptionI, OptionII, Strategy
from fedsim.models import READOUT_MODES, GinConfig, LinearConfig, MlpConfig

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "dataset.kind": "blobs",
    "dataset.num_classes": "4",
    "dataset.num_features": "16",
    "dataset.margin": "1.0",
    "dataset.noise": "1.0",
    "dataset.num_samples": "4000",
    "dataset.feature_shift": "0.0",
    "dataset.test_fraction": "0.2",
    "dataset.images": "",
    "dataset.labels": "",
    "dataset.roster": "default",
    "partition.kind": "auto",
    "partition.num_clients": "20",
    "partition.alpha": "0.15",
    "partition.shift": "1.0",
    "model.kind": "auto",
    "model.hidden": "64,64",
    "model.gin.layers": "2",
    "model.gin.width": "8",
    "model.readout": "mean",
    "model.head_width_multiplier": "1",
    "strategy.kind": "fedavg",
    "strategy.fedprox.mu": "0.01",
    "strategy.fedr.mu": "0.1",
    "strategy.fedr.option": "II",
    "strategy.fedr.a": "0.5",
    "strategy.fedr.coeffs": "0.2,0.3,0.5",
    "strategy.fedkd.inner": "fedavg",
    "strategy.fedkd.alpha": "0.5",
    "strategy.fedkd.temperature": "10.0",
    "strategy.fedkd.readout": "",
    "strategy.fedkd.readouts": "",
    "strategy.mu_overrides": "",
    "train.rounds": "100",
    "train.scr": "auto",
    "train.local_epochs": "1",
    "train.lr": "0.1",
    "train.batch_size": "32",
    "train.clip_norm": "auto",
    "train.eval_every": "auto",
    "baseline.mode": "auto",
    "baseline.path": "",
    "output.dir": "fedsim-out",
}

DATASET_KINDS = ("blobs", "graphs", "idx")
PARTITION_KINDS = ("iid", "dirichlet", "feature_shift", "roster")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key ({source}:{line_no})", key)
        values[key] = value
    return values


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(), str(path))


def _int(values: Mapping[str, str], key: str, minimum: int | None = None) -> int:
    try:
        out = int(values[key])
    except ValueError:
        raise ConfigError(f"expected an integer, got {values[key]!r}", key) from None
    if minimum is not None and out < minimum:
        raise ConfigError(f"must be >= {minimum}, got {out}", key)
    return out


def _float(values: Mapping[str, str], key: str) -> float:
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"expected a number, got {values[key]!r}", key) from None


def _choice(values: Mapping[str, str], key: str, options) -> str:
    value = values[key]
    if value not in options:
        raise ConfigError(f"expected one of {', '.join(options)}, got {value!r}", key)
    return value


def _floats(values: Mapping[str, str], key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in values[key].split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {values[key]!r}", key) from None


def _table(values: Mapping[str, str], key: str) -> dict[int, str]:
    """``client:value,client:value`` into a dict."""
    out = {}
    for item in filter(None, (s.strip() for s in values[key].split(","))):
        client, sep, value = item.partition(":")
        if not sep:
            raise ConfigError(f"expected client:value entries, got {item!r}", key)
        try:
            out[int(client)] = value.strip()
        except ValueError:
            raise ConfigError(f"bad client id {client!r}", key) from None
    return out


@dataclass(frozen=True)
class TrainConfig:
    rounds: int
    scr: float
    local_epochs: int
    lr: float
    batch_size: int
    eval_every: int
    clip_norm: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated experiment settings.

    ``values`` keeps the full resolved key/value table; its canonical text
    form is what :attr:`digest` hashes.
    """

    values: Mapping[str, str]
    seed: int
    dataset_kind: str
    partition_kind: str
    model: object
    strategy: Strategy
    train: TrainConfig
    baseline_mode: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def canonical_text(self) -> str:
        return "".join(f"{key} = {self.values[key]}\n" for key in sorted(self.values))

    def get(self, key: str) -> str:
        return self.values[key]

    def with_overrides(self, **overrides: str) -> "ExperimentConfig":
        """Rebuild with dotted keys given as ``dataset__kind="graphs"`` style kwargs."""
        updated = dict(self.values)
        updated.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return build_config(updated)


def resolve(values: Mapping[str, str]) -> dict[str, str]:
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError("unknown key", unknown[0])
    out = {**DEFAULTS, **values}
    kind = _choice(out, "dataset.kind", DATASET_KINDS)
    graphs = kind == "graphs"
    auto = {
        "partition.kind": "roster" if graphs else "dirichlet",
        "model.kind": "gin" if graphs else "mlp",
        "train.scr": "1.0" if graphs else "0.2",
        "train.eval_every": "5" if graphs else "10",
        "train.clip_norm": "1.0" if graphs else "0",
        "baseline.mode": "isolated" if graphs else "none",
    }
    for key, value in auto.items():
        if out[key] == "auto":
            out[key] = value
    return out


def build_strategy(values: Mapping[str, str], kind: str | None = None) -> Strategy:
    kind = kind or _choice(values, "strategy.kind", ("fedavg", "fedprox", "fedr", "fedkd"))
    try:
        overrides = {k: float(v) for k, v in _table(values, "strategy.mu_overrides").items()}
    except ValueError:
        raise ConfigError("expected client:mu entries with numeric mu", "strategy.mu_overrides") from None
    if kind == "fedavg":
        return FedAvg()
    if kind == "fedprox":
        return FedProx(_float(values, "strategy.fedprox.mu"), tuple(overrides.items()))
    if kind == "fedr":
        option = _choice(values, "strategy.fedr.option", ("I", "II"))
        mode = OptionI(_floats(values, "strategy.fedr.coeffs")) if option == "I" else OptionII(_float(values, "strategy.fedr.a"))
        return Fedr(_float(values, "strategy.fedr.mu"), mode, tuple(overrides.items()))
    inner = build_strategy(values, _choice(values, "strategy.fedkd.inner", ("fedavg", "fedprox", "fedr")))
    return FedKd(inner, _float(values, "strategy.fedkd.alpha"), _float(values, "strategy.fedkd.temperature"))


def _model_config(values: Mapping[str, str], kind: str, input_dim: int, num_classes: int, readout: str | None = None):
    if kind == "mlp":
        try:
            hidden = tuple(int(h) for h in values["model.hidden"].split(",") if h.strip())
        except ValueError:
            raise ConfigError(f"expected comma-separated integers, got {values['model.hidden']!r}", "model.hidden") from None
        return MlpConfig(input_dim, hidden, num_classes)
    if kind == "linear":
        return LinearConfig(input_dim, num_classes)
    readout = readout or _choice(values, "model.readout", READOUT_MODES)
    return GinConfig(
        input_dim,
        _int(values, "model.gin.layers", 1),
        _int(values, "model.gin.width", 1),
        readout,
        "multitask",
        2,
        _int(values, "model.head_width_multiplier", 1),
    )


def build_config(values: Mapping[str, str]) -> ExperimentConfig:
    """Validate a raw key/value table; raises ``ConfigError`` naming the field."""
    v = resolve(values)
    seed = _int(v, "seed", 0)
    if seed >= 2**64:
        raise ConfigError("must fit in 64 bits", "seed")
    kind = v["dataset.kind"]
    partition = _choice(v, "partition.kind", PARTITION_KINDS)
    if (partition == "roster") != (kind == "graphs"):
        raise ConfigError("roster partitions go with graph datasets (and only them)", "partition.kind")
    if kind == "blobs":
        _int(v, "dataset.num_samples", 1)
        if _int(v, "dataset.num_classes", 2) > 255:
            raise ConfigError("at most 255 classes", "dataset.num_classes")
        _int(v, "dataset.num_features", 1)
        for key in ("dataset.margin", "dataset.feature_shift"):
            if _float(v, key) < 0:
                raise ConfigError("must be >= 0", key)
        if not _float(v, "dataset.noise") > 0:
            raise ConfigError("must be > 0", "dataset.noise")
    if kind == "idx" and not (v["dataset.images"] and v["dataset.labels"]):
        raise ConfigError("idx datasets need dataset.images and dataset.labels", "dataset.images")
    if kind == "graphs" and v["dataset.roster"] != "default":
        raise ConfigError("only the 'default' roster is built in", "dataset.roster")
    if not 0 <= _float(v, "dataset.test_fraction") < 1:
        raise ConfigError("must lie in [0, 1)", "dataset.test_fraction")
    _int(v, "partition.num_clients", 1)
    if partition == "dirichlet" and not _float(v, "partition.alpha") > 0:
        raise ConfigError(f"must be > 0, got {v['partition.alpha']}", "partition.alpha")
    if partition == "feature_shift" and _float(v, "partition.shift") < 0:
        raise ConfigError("must be >= 0", "partition.shift")

    model_kind = _choice(v, "model.kind", ("mlp", "linear", "gin"))
    if (model_kind == "gin") != (kind == "graphs"):
        raise ConfigError("gin models go with graph datasets (and only them)", "model.kind")
    features = 3 if kind == "graphs" else (784 if kind == "idx" else int(v["dataset.num_features"]))
    classes = 10 if kind == "idx" else int(v["dataset.num_classes"])
    model = _model_config(v, model_kind, features, classes)

    strategy = build_strategy(v)
    if isinstance(strategy, FedKd):
        default_readout = v["strategy.fedkd.readout"]
        per_client = _table(v, "strategy.fedkd.readouts")
        if default_readout or per_client:
            if model_kind != "gin":
                raise ConfigError("personal readouts need a gin model", "strategy.fedkd.readout")
            for key, readout in [("strategy.fedkd.readout", default_readout), *(("strategy.fedkd.readouts", r) for r in per_client.values())]:
                if readout and readout not in READOUT_MODES:
                    raise ConfigError(f"unknown readout {readout!r}", key)
            personal = _model_config(v, model_kind, features, classes, default_readout or None)
            table = tuple((k, _model_config(v, model_kind, features, classes, r)) for k, r in per_client.items())
            strategy = FedKd(strategy.inner, strategy.alpha, strategy.temperature, personal, table)

    scr = _float(v, "train.scr")
    if not 0 < scr <= 1:
        raise ConfigError(f"must lie in (0, 1], got {scr}", "train.scr")
    lr = _float(v, "train.lr")
    if not lr >= 0:
        raise ConfigError("must be >= 0", "train.lr")
    clip = _float(v, "train.clip_norm")
    if not clip >= 0:
        raise ConfigError("must be >= 0 (0 disables clipping)", "train.clip_norm")
    train = TrainConfig(
        _int(v, "train.rounds", 1), scr, _int(v, "train.local_epochs", 1), lr,
        _int(v, "train.batch_size", 1), _int(v, "train.eval_every", 1), clip,
    )
    baseline = _choice(v, "baseline.mode", ("none", "isolated", "file"))
    if baseline == "file" and not v["baseline.path"]:
        raise ConfigError("baseline.mode=file needs a path", "baseline.path")
    return ExperimentConfig(v, seed, kind, partition, model, strategy, train, baseline)


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    values = load_config_file(path) if path else {}
    values.update(overrides or {})
    return build_config(values)
