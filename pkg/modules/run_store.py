"""Module for run directories: resolved config, JSON-lines logs, checkpoints, reports."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import orjson
import pandas as pd

from modules.errors import InputError
from modules.evaluation import RoundReport
from modules.nn_core import DenseNet, save_checkpoint
from modules.run_config import TrainingConfig, dump_config
from modules.transfer import KnowledgePacket, packet_record, write_packet_payload

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.resolved"
EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.jsonl"
PAYLOAD_FILE = "payloads.bin"
CHECKPOINT_DIR = "checkpoints"

SUMMARY_COLUMNS = [
    "round",
    "edge_accuracy_mean",
    "edge_accuracy_std",
    "edge_accuracy_pooled",
    "cloud_accuracy_mean",
    "cloud_accuracy_pooled",
    "edge_auc_mean",
    "edge_mse_mean",
    "cloud_auc_mean",
    "cloud_mse_mean",
    "train_loss_mean",
    "cloud_loss",
    "staleness_edge",
    "staleness_cloud",
    "packets_up",
    "packets_down",
]


def _dumps(record: Dict[str, Any]) -> bytes:
    return orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_APPEND_NEWLINE)


class RunWriter:
    """Owns the files of one run directory."""

    def __init__(self, run_dir: Union[str, Path], dump_payloads: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._events = open(self.run_dir / EVENTS_FILE, "wb")
        self._metrics = open(self.run_dir / METRICS_FILE, "wb")
        self._payloads = open(self.run_dir / PAYLOAD_FILE, "wb") if dump_payloads else None

    def write_config(self, cfg: TrainingConfig) -> Path:
        path = self.run_dir / CONFIG_FILE
        path.write_text(dump_config(cfg), encoding="utf-8")
        return path

    def log_packet(self, packet: KnowledgePacket, delivered_round: int) -> None:
        self._events.write(_dumps(packet_record(packet, delivered_round)))
        if self._payloads is not None:
            write_packet_payload(packet, self._payloads, delivered_round)

    def log_event(self, record: Dict[str, Any]) -> None:
        self._events.write(_dumps(record))

    def log_report(self, report: RoundReport) -> None:
        self._metrics.write(_dumps(report.model_dump(mode="json")))

    def save_net(self, name: str, net: DenseNet) -> Path:
        return save_checkpoint(net, self.run_dir / CHECKPOINT_DIR / f"{name}.dnet")

    def close(self) -> None:
        for f in (self._events, self._metrics, self._payloads):
            if f is not None:
                f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(run_dir: Union[str, Path]) -> List[RoundReport]:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise InputError(f"{run_dir} has no {METRICS_FILE}")
    with open(path, "rb") as f:
        return [RoundReport.model_validate(orjson.loads(line)) for line in f if line.strip()]


def read_events(run_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(run_dir) / EVENTS_FILE
    if not path.exists():
        return []
    with open(path, "rb") as f:
        return [orjson.loads(line) for line in f if line.strip()]


def summarize_reports(reports: Sequence[RoundReport]) -> pd.DataFrame:
    """One row per round with the aggregate metrics."""
    rows = [{column: getattr(r, column) for column in SUMMARY_COLUMNS} for r in reports]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS).set_index("round")


def _format(df: pd.DataFrame) -> str:
    return df.to_string(float_format=lambda v: f"{v:.4f}", na_rep="-")


def render_report(run_dir: Union[str, Path], last: Optional[int] = None) -> str:
    """Aligned text tables: per-round aggregates and per-device final metrics."""
    reports = read_metrics(run_dir)
    if not reports:
        raise InputError(f"{run_dir} has no round reports")
    summary = summarize_reports(reports).dropna(axis=1, how="all")
    if last is not None:
        summary = summary.tail(last)
    final = reports[-1]
    devices = pd.DataFrame([d.model_dump() for d in final.devices]).set_index("device_id")
    devices = devices.dropna(axis=1, how="all")
    header = f"Run {Path(run_dir).name} ({final.method}, {len(reports) - 1} rounds)"
    return "\n\n".join([
        header,
        "Per-round aggregates\n" + _format(summary),
        f"Per-device metrics after round {final.round}\n" + _format(devices),
    ])


def compare_runs(run_a: Union[str, Path], run_b: Union[str, Path]) -> pd.DataFrame:
    """Final-round aggregate metrics of two runs side by side with their difference."""
    final_a = summarize_reports(read_metrics(run_a)).iloc[-1]
    final_b = summarize_reports(read_metrics(run_b)).iloc[-1]
    table = pd.DataFrame({"run_a": final_a, "run_b": final_b})
    table = table.apply(pd.to_numeric, errors="coerce").dropna(how="all")
    table["delta"] = table["run_b"] - table["run_a"]
    return table


def render_comparison(run_a: Union[str, Path], run_b: Union[str, Path]) -> str:
    header = f"run_a = {run_a}\nrun_b = {run_b}"
    return header + "\n\n" + _format(compare_runs(run_a, run_b))
