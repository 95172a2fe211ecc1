import orjson
import pytest

from modules.errors import EcctError
from modules.experiments import (
    ASYNC_REGIMES,
    ERROR_CELL,
    run_suite,
    suite_async,
    suite_feature_settings,
    suite_scaling,
)
from modules.run_config import apply_overrides, build_config


@pytest.fixture
def suite_cfg(tiny_cfg):
    return apply_overrides(tiny_cfg, {"rounds": 3})


def test_scaling_table_shape_and_files(tmp_path, suite_cfg):
    table = suite_scaling(suite_cfg, seeds=1, suite_dir=tmp_path, device_counts=[4], ratios=[1.0, 0.5])
    assert list(table.display.index) == ["FedAvg", "FedGKT", "ECCT"]
    assert list(table.display.columns) == ["K=4 @ 1.0", "K=4 @ 0.5"]
    assert all(0.0 <= v <= 1.0 for v in table.values.values())
    saved = orjson.loads((tmp_path / "table.json").read_bytes())
    assert saved["columns"] == ["K=4 @ 1.0", "K=4 @ 0.5"]
    assert (tmp_path / "table.txt").exists()
    assert len(list((tmp_path / "runs").iterdir())) == 6


def test_feature_settings_marks_hetero_fedavg_as_error(suite_cfg):
    table = suite_feature_settings(suite_cfg, seeds=1)
    assert len(table.display) == 10
    assert table.display.loc["FedAvg (F) | IID", "hetero"] == ERROR_CELL
    assert table.display.loc["FedAvg (C2F) | NonIID", "hetero"] == ERROR_CELL
    assert table.display.loc["ECCT (C&F) | NonIID", "hetero"] != ERROR_CELL


def test_async_table_reports_drop_against_sync(suite_cfg):
    table = suite_async(suite_cfg, seeds=1)
    assert list(table.display.index) == ASYNC_REGIMES
    assert table.display.loc["sync", "ECCT @ 1.0"].endswith("(-)")
    cell = table.display.loc["asyn_epoch", "FedAvg @ 0.5"]
    assert "%" in cell
    assert table.changes[("sync", "ECCT @ 1.0")] is None
    assert isinstance(table.changes[("asyn_both", "ECCT @ 0.5")], float)
    assert b"percent_drop" in table.to_json()


def test_cells_rejected_by_validation_become_error_cells(suite_cfg):
    # 0.1 x 4 devices selects nobody
    table = suite_scaling(suite_cfg, seeds=1, device_counts=[4], ratios=[1.0, 0.1])
    for label in ("FedAvg", "FedGKT", "ECCT"):
        assert table.display.loc[label, "K=4 @ 0.1"] == ERROR_CELL
        assert table.values[(label, "K=4 @ 0.1")] is None
        assert table.display.loc[label, "K=4 @ 1.0"] != ERROR_CELL


def test_unknown_suite_is_rejected(suite_cfg):
    with pytest.raises(EcctError):
        run_suite("nope", suite_cfg)


@pytest.mark.slow
def test_ecct_beats_federated_baselines_on_the_default_task():
    table = suite_feature_settings(build_config({"progress": False, "save_checkpoints": False}), seeds=3, jobs=4)
    for arch in ("homo", "hetero"):
        ecct = table.values[("ECCT (C&F) | IID", arch)]
        assert ecct >= table.values[("FedAvg (F) | IID", "homo")] + 0.05
        assert ecct > table.values[("FedGKT (F) | IID", arch)]


@pytest.mark.slow
def test_ecct_degrades_less_than_fedavg_under_asynchrony():
    table = suite_async(build_config({"progress": False, "save_checkpoints": False}), seeds=3, jobs=4)
    wins = 0
    for regime in ASYNC_REGIMES[1:]:
        for ratio in (1.0, 0.5):
            if table.changes[(regime, f"ECCT @ {ratio}")] < table.changes[(regime, f"FedAvg @ {ratio}")]:
                wins += 1
    wins += table.changes[("sync", "ECCT @ 0.5")] < table.changes[("sync", "FedAvg @ 0.5")]
    assert wins >= 6
