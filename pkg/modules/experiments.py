"""Module for the comparison suites: feature settings, asynchrony and device scaling.

Every cell of a suite is the median, over seeds, of the final mean edge
accuracy of one run. Cells are independent runs and may execute in parallel
processes.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from joblib import Parallel, delayed

from modules.errors import ConfigError, EcctError
from modules.orchestrator import run_training
from modules.run_config import TrainingConfig, apply_overrides

logger = logging.getLogger(__name__)

SUITES = ("feature-settings", "async", "scaling")
ERROR_CELL = "error"

FEATURE_SETTING_ROWS = [
    ("FedAvg (F)", "fedavg", "F"),
    ("FedGKT (F)", "fedgkt", "F"),
    ("FedAvg (C2F)", "fedavg", "C2F"),
    ("FedGKT (C2F)", "fedgkt", "C2F"),
    ("ECCT (C&F)", "ecct", "CandF"),
]
DATA_REGIMES = [("IID", "iid"), ("NonIID", "dirichlet")]
ASYNC_REGIMES = ["sync", "asyn_version", "asyn_epoch", "asyn_both"]
ASYNC_METHODS = [("FedAvg", "fedavg", "F"), ("ECCT", "ecct", "CandF")]
ASYNC_RATIOS = [1.0, 0.5]
SCALING_METHODS = [("FedAvg", "fedavg", "F"), ("FedGKT", "fedgkt", "F"), ("ECCT", "ecct", "CandF")]
SCALING_DEVICES = [50, 100]
SCALING_RATIOS = [0.6, 0.3, 0.1]


@dataclass
class SuiteTable:
    """A rendered comparison table plus the numbers behind it."""

    name: str
    display: pd.DataFrame
    values: Dict[Tuple[str, str], Optional[float]]
    changes: Dict[Tuple[str, str], Optional[float]] = field(default_factory=dict)

    def to_text(self) -> str:
        return f"{self.name}\n\n" + self.display.to_string()

    def to_json(self) -> bytes:
        record = {
            "suite": self.name,
            "rows": [str(i) for i in self.display.index],
            "columns": [str(c) for c in self.display.columns],
            "cells": self.display.astype(str).values.tolist(),
            "values": [{"row": r, "column": c, "value": v} for (r, c), v in self.values.items()],
        }
        if self.changes:
            record["percent_drop"] = [{"row": r, "column": c, "value": v} for (r, c), v in self.changes.items()]
        return orjson.dumps(record, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.txt").write_text(self.to_text() + "\n", encoding="utf-8")
        (out_dir / "table.json").write_bytes(self.to_json())
        logger.info(f"Wrote {self.name} table to {out_dir}")
        return out_dir


def _slug(*parts: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", "_".join(parts)).strip("_")


def _run_cell(base: Dict[str, Any], overrides: Dict[str, Any], run_dir: Optional[str]) -> Optional[float]:
    """Final mean edge accuracy of one run, or None when the configuration is rejected."""
    try:
        cfg = apply_overrides(TrainingConfig.model_validate(base), dict(overrides, progress=False, workers=1))
        result = run_training(cfg, run_dir)
    except ConfigError as e:
        logger.info(f"Cell {overrides} rejected: {e}")
        return None
    return result.reports[-1].edge_accuracy_mean


def run_cells(
        base_cfg: TrainingConfig,
        cells: Dict[Tuple[str, str], Dict[str, Any]],
        seeds: int = 3,
        jobs: int = 1,
        suite_dir: Optional[Union[str, Path]] = None
) -> Dict[Tuple[str, str], Optional[float]]:
    """Runs every cell under ``seeds`` consecutive seeds and returns the per-cell medians."""
    base = base_cfg.model_dump()
    tasks = []
    for key, overrides in cells.items():
        for i in range(seeds):
            seed = base_cfg.seed + i
            run_dir = None
            if suite_dir is not None:
                run_dir = str(Path(suite_dir) / "runs" / _slug(*key, f"seed{seed}"))
            tasks.append((key, dict(overrides, seed=seed), run_dir))

    logger.info(f"Running {len(tasks)} runs ({len(cells)} cells x {seeds} seeds) with {jobs} jobs")
    if jobs > 1:
        outcomes = Parallel(n_jobs=jobs, backend="loky")(delayed(_run_cell)(base, o, d) for _, o, d in tasks)
    else:
        outcomes = [_run_cell(base, o, d) for _, o, d in tasks]

    per_cell: Dict[Tuple[str, str], List[Optional[float]]] = {key: [] for key in cells}
    for (key, _, _), value in zip(tasks, outcomes):
        per_cell[key].append(value)
    return {
        key: None if any(v is None for v in values) else float(np.median(values))
        for key, values in per_cell.items()
    }


def _percent(value: Optional[float]) -> str:
    return ERROR_CELL if value is None else f"{100.0 * value:.2f}"


def suite_feature_settings(
        base_cfg: TrainingConfig,
        seeds: int = 3,
        jobs: int = 1,
        suite_dir: Optional[Union[str, Path]] = None
) -> SuiteTable:
    """Methods x feature settings (rows) by IID/NonIID and homo/hetero edge models."""
    cells, rows = {}, []
    for label, method, setting in FEATURE_SETTING_ROWS:
        for regime, partition in DATA_REGIMES:
            rows.append(f"{label} | {regime}")
            for arch in ("homo", "hetero"):
                cells[(f"{label} | {regime}", arch)] = {
                    "method": method,
                    "feature_setting": setting,
                    "data.partition": partition,
                    "architecture.hetero": arch == "hetero",
                }
    values = run_cells(base_cfg, cells, seeds, jobs, suite_dir)
    display = pd.DataFrame(
        [[_percent(values[(r, c)]) for c in ("homo", "hetero")] for r in rows],
        index=pd.Index(rows, name="method | data"),
        columns=["homo", "hetero"]
    )
    table = SuiteTable(name="Edge accuracy (%) by feature setting", display=display, values=values)
    if suite_dir is not None:
        table.save(suite_dir)
    return table


def _change(value: Optional[float], baseline: Optional[float]) -> Optional[float]:
    if value is None or baseline is None or baseline == 0:
        return None
    return 100.0 * (baseline - value) / baseline


def _change_cell(value: Optional[float], change: Optional[float], is_baseline: bool) -> str:
    if value is None:
        return ERROR_CELL
    if is_baseline:
        return f"{100.0 * value:.2f} (-)"
    arrow = "↓" if change >= 0 else "↑"
    return f"{100.0 * value:.2f} ({abs(change):.1f}%{arrow})"


def suite_async(
        base_cfg: TrainingConfig,
        seeds: int = 3,
        jobs: int = 1,
        suite_dir: Optional[Union[str, Path]] = None
) -> SuiteTable:
    """Asynchrony regimes (rows) by method and selection ratio, with the drop against sync at ratio 1.0."""
    cells = {}
    columns = [f"{label} @ {ratio}" for label, _, _ in ASYNC_METHODS for ratio in ASYNC_RATIOS]
    for label, method, setting in ASYNC_METHODS:
        for ratio in ASYNC_RATIOS:
            for regime in ASYNC_REGIMES:
                cells[(regime, f"{label} @ {ratio}")] = {
                    "method": method,
                    "feature_setting": setting,
                    "async_mode": regime,
                    "select_ratio": ratio,
                }
    values = run_cells(base_cfg, cells, seeds, jobs, suite_dir)

    changes: Dict[Tuple[str, str], Optional[float]] = {}
    grid = []
    for regime in ASYNC_REGIMES:
        row = []
        for label, _, _ in ASYNC_METHODS:
            baseline = values[("sync", f"{label} @ {ASYNC_RATIOS[0]}")]
            for ratio in ASYNC_RATIOS:
                key = (regime, f"{label} @ {ratio}")
                is_baseline = regime == "sync" and ratio == ASYNC_RATIOS[0]
                changes[key] = None if is_baseline else _change(values[key], baseline)
                row.append(_change_cell(values[key], changes[key], is_baseline))
        grid.append(row)
    display = pd.DataFrame(grid, index=pd.Index(ASYNC_REGIMES, name="regime"), columns=columns)
    table = SuiteTable(
        name="Edge accuracy (%) under asynchrony",
        display=display,
        values=values,
        changes=changes
    )
    if suite_dir is not None:
        table.save(suite_dir)
    return table


def suite_scaling(
        base_cfg: TrainingConfig,
        seeds: int = 3,
        jobs: int = 1,
        suite_dir: Optional[Union[str, Path]] = None,
        device_counts: Sequence[int] = SCALING_DEVICES,
        ratios: Sequence[float] = SCALING_RATIOS
) -> SuiteTable:
    """Methods (rows) by number of devices and selection ratio."""
    cells = {}
    columns = [f"K={k} @ {ratio}" for k in device_counts for ratio in ratios]
    for label, method, setting in SCALING_METHODS:
        for k in device_counts:
            for ratio in ratios:
                cells[(label, f"K={k} @ {ratio}")] = {
                    "method": method,
                    "feature_setting": setting,
                    "num_devices": k,
                    "select_ratio": ratio,
                }
    values = run_cells(base_cfg, cells, seeds, jobs, suite_dir)
    labels = [label for label, _, _ in SCALING_METHODS]
    display = pd.DataFrame(
        [[_percent(values[(label, c)]) for c in columns] for label in labels],
        index=pd.Index(labels, name="method"),
        columns=columns
    )
    table = SuiteTable(name="Edge accuracy (%) by devices and selection ratio", display=display, values=values)
    if suite_dir is not None:
        table.save(suite_dir)
    return table


def run_suite(
        name: str,
        base_cfg: TrainingConfig,
        seeds: int = 3,
        jobs: int = 1,
        suite_dir: Optional[Union[str, Path]] = None
) -> SuiteTable:
    if name == "feature-settings":
        return suite_feature_settings(base_cfg, seeds, jobs, suite_dir)
    if name == "async":
        return suite_async(base_cfg, seeds, jobs, suite_dir)
    if name == "scaling":
        return suite_scaling(base_cfg, seeds, jobs, suite_dir)
    raise EcctError(f"unknown suite '{name}', expected one of {SUITES}")
