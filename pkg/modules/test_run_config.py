import math

import pytest

import config
from modules.errors import ConfigError
from modules.run_config import (
    apply_overrides,
    build_config,
    dump_config,
    load_config,
    validate_for_method,
)


def test_defaults_come_from_config_module():
    cfg = build_config()
    assert cfg.num_devices == config.NUM_DEVICES
    assert cfg.rounds == config.ROUNDS
    assert cfg.architecture.embedding_dim == config.EMBEDDING_DIM
    assert cfg.loss.kd_temperature == config.KD_TEMPERATURE
    assert cfg.transfer.effective_downlink_capacity == config.BUFFER_CAPACITY
    assert math.isinf(cfg.privacy.effective_clip_norm)


def test_dotted_overrides_parse_yaml_scalars():
    cfg = apply_overrides(build_config(), {
        "loss.alpha_s": "0.5",
        "rounds": "7",
        "architecture.edge_encoder_widths": "[4, 4]",
        "architecture.hetero": "true",
    })
    assert cfg.loss.alpha_s == 0.5
    assert cfg.rounds == 7
    assert cfg.architecture.edge_encoder_widths == [4, 4]
    assert cfg.architecture.hetero is True


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(build_config(), {"loss.alpha": 1})
    with pytest.raises(ConfigError):
        apply_overrides(build_config(), {"nosuch.section": 1})


@pytest.mark.parametrize("data", [
    {"rounds": -1},
    {"select_ratio": 0.0},
    {"num_devices": 0},
    {"loss": {"kd_temperature": 0}},
    {"data": {"test_ratio": 1.0}},
    {"data": {"source": "csv"}},
    {"num_devices": 10, "select_ratio": 0.05},
    {"device_epoch_overrides": {3: 0}},
])
def test_invalid_values_are_config_errors(data):
    with pytest.raises(ConfigError):
        build_config(data)


@pytest.mark.parametrize("method,setting", [
    ("ecct", "C2F"),
    ("fedavg", "CandF"),
    ("fedgkt", "CandF"),
])
def test_method_and_feature_setting_must_match(method, setting):
    with pytest.raises(ConfigError):
        validate_for_method(build_config({"method": method, "feature_setting": setting}))


def test_hetero_fedavg_is_rejected():
    cfg = build_config({"method": "fedavg", "feature_setting": "F", "architecture": {"hetero": True}})
    with pytest.raises(ConfigError):
        validate_for_method(cfg)


def test_epoch_overrides_apply_per_device():
    cfg = build_config({"device_epochs": 2, "device_epoch_overrides": {1: 5}})
    assert cfg.epochs_for(0) == 2
    assert cfg.epochs_for(1) == 5


def test_yaml_file_and_dump_agree(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("method: fedavg\nfeature_setting: F\nloss:\n  alpha_d: 0.25\n", encoding="utf-8")
    cfg = load_config(path, overrides={"seed": "3"})
    assert (cfg.method, cfg.loss.alpha_d, cfg.seed) == ("fedavg", 0.25, 3)
    again = tmp_path / "again.yaml"
    again.write_text(dump_config(cfg), encoding="utf-8")
    assert load_config(again) == cfg


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
