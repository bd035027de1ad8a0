import pytest

from fedsim.config import DEFAULTS, build_config, load_config, parse_config_text
from fedsim.errors import ConfigError
from fedsim.fedcore import FedAvg, FedKd, FedProx, Fedr, OptionI, OptionII
from fedsim.models import GinConfig, MlpConfig


def field_of(values):
    with pytest.raises(ConfigError) as info:
        build_config(values)
    return info.value.field


def test_defaults_are_the_desk_scale_blob_run():
    config = build_config({})
    assert config.dataset_kind == "blobs" and config.partition_kind == "dirichlet"
    assert config.train.rounds == 100 and config.train.scr == 0.2 and config.train.eval_every == 10
    assert config.train.lr == 0.1 and config.train.clip_norm == 0.0
    assert isinstance(config.model, MlpConfig) and config.model.input_dim == 16
    assert config.strategy == FedAvg()


def test_graph_defaults_resolve_from_dataset_kind():
    config = build_config({"dataset.kind": "graphs"})
    assert config.partition_kind == "roster" and isinstance(config.model, GinConfig)
    assert config.train.scr == 1.0 and config.train.eval_every == 5 and config.train.clip_norm == 1.0
    assert config.baseline_mode == "isolated"


@pytest.mark.parametrize(
    "values,field",
    [
        ({"partition.alpha": "0"}, "partition.alpha"),
        ({"partition.alpha": "-1"}, "partition.alpha"),
        ({"train.scr": "1.5"}, "train.scr"),
        ({"train.rounds": "0"}, "train.rounds"),
        ({"train.eval_every": "0"}, "train.eval_every"),
        ({"train.lr": "fast"}, "train.lr"),
        ({"strategy.kind": "scaffold"}, "strategy.kind"),
        ({"strategy.kind": "fedr", "strategy.fedr.a": "1"}, "strategy.fedr.a"),
        ({"strategy.kind": "fedr", "strategy.fedr.option": "I", "strategy.fedr.coeffs": "0.5,0.4"}, "strategy.fedr.coeffs"),
        ({"strategy.kind": "fedr", "strategy.fedr.mu": "-0.1"}, "strategy.fedr.mu"),
        ({"strategy.kind": "fedkd", "strategy.fedkd.alpha": "2"}, "strategy.fedkd.alpha"),
        ({"strategy.kind": "fedkd", "strategy.fedkd.temperature": "0"}, "strategy.fedkd.temperature"),
        ({"strategy.kind": "fedkd", "strategy.fedkd.readout": "mix"}, "strategy.fedkd.readout"),
        ({"dataset.kind": "graphs", "model.readout": "median"}, "model.readout"),
        ({"dataset.kind": "idx"}, "dataset.images"),
        ({"dataset.kind": "graphs", "partition.kind": "iid"}, "partition.kind"),
        ({"model.kind": "gin"}, "model.kind"),
        ({"seed": "-3"}, "seed"),
        ({"baseline.mode": "file"}, "baseline.path"),
        ({"strategy.mu_overrides": "3=0.1"}, "strategy.mu_overrides"),
        ({"no.such.key": "1"}, "no.such.key"),
    ],
)
def test_errors_name_the_field(values, field):
    assert field_of(values) == field


def test_error_message_carries_field_path():
    with pytest.raises(ConfigError, match="partition.alpha"):
        build_config({"partition.alpha": "0"})


def test_strategy_construction():
    assert build_config({"strategy.kind": "fedprox", "strategy.fedprox.mu": "0.3"}).strategy == FedProx(0.3)
    fedr = build_config({"strategy.kind": "fedr", "strategy.fedr.option": "I"}).strategy
    assert fedr == Fedr(0.1, OptionI((0.2, 0.3, 0.5)))
    kd = build_config({"strategy.kind": "fedkd", "strategy.fedkd.inner": "fedr", "strategy.mu_overrides": "2:0.5"}).strategy
    assert kd.inner == Fedr(0.1, OptionII(0.5), ((2, 0.5),))
    assert isinstance(kd, FedKd) and kd.alpha == 0.5 and kd.temperature == 10.0


def test_personal_readouts_per_client():
    config = build_config(
        {"dataset.kind": "graphs", "strategy.kind": "fedkd", "strategy.fedkd.readout": "mix", "strategy.fedkd.readouts": "3:max"}
    )
    assert config.strategy.personal_config_for(0, config.model).readout == "mix"
    assert config.strategy.personal_config_for(3, config.model).readout == "max"


def test_file_parsing_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nstrategy.kind = fedr   # trailing\n\ntrain.rounds = 7\n")
    config = load_config(path, {"train.rounds": "9"})
    assert config.strategy.name == "fedr" and config.train.rounds == 9
    with pytest.raises(ConfigError, match="run.cfg:1"):
        parse_config_text("just words", "run.cfg")


def test_digest_tracks_resolved_values():
    a, b = build_config({}), build_config({"train.scr": "0.2"})
    assert a.digest == b.digest
    assert a.digest != build_config({"seed": "1"}).digest
    assert a.with_overrides(seed="1").digest == build_config({"seed": "1"}).digest


def test_every_default_is_accepted():
    assert set(build_config(dict(DEFAULTS)).values) == set(DEFAULTS)
