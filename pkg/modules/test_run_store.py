import numpy as np
import orjson
import pytest

from modules.errors import InputError
from modules.orchestrator import run_training
from modules.run_config import apply_overrides, load_config
from modules.run_store import (
    CONFIG_FILE,
    EVENTS_FILE,
    PAYLOAD_FILE,
    compare_runs,
    read_metrics,
    render_comparison,
    render_report,
    summarize_reports,
)


@pytest.fixture
def run_dir(tmp_path, tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"transfer.dump_payloads": True})
    run_training(cfg, tmp_path / "run")
    return tmp_path / "run"


def test_run_directory_layout(run_dir, tiny_cfg):
    assert load_config(run_dir / CONFIG_FILE).rounds == tiny_cfg.rounds
    reports = read_metrics(run_dir)
    assert [r.round for r in reports] == list(range(-1, tiny_cfg.rounds))
    lines = (run_dir / EVENTS_FILE).read_bytes().splitlines()
    assert all(orjson.loads(line)["bytes"] > 0 for line in lines)
    assert (run_dir / PAYLOAD_FILE).stat().st_size > 0


def test_summary_has_one_row_per_round(run_dir, tiny_cfg):
    summary = summarize_reports(read_metrics(run_dir))
    assert list(summary.index) == list(range(-1, tiny_cfg.rounds))
    assert summary["edge_accuracy_mean"].between(0.0, 1.0).all()


def test_render_report_mentions_devices(run_dir):
    text = render_report(run_dir, last=2)
    assert "Per-round aggregates" in text
    assert "Per-device metrics" in text


def test_compare_run_with_itself_has_zero_delta(run_dir):
    table = compare_runs(run_dir, run_dir)
    assert np.all(table["delta"].fillna(0.0) == 0.0)
    assert "run_a" in render_comparison(run_dir, run_dir)


def test_missing_metrics_is_an_input_error(tmp_path):
    with pytest.raises(InputError):
        read_metrics(tmp_path)
