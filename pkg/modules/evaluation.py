"""Module for metrics, the two inference strategies and per-round reports."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from modules.errors import InputError, ShapeError
from modules.losses import softmax
from modules.nn_core import forward
from modules.participants import CloudState, ParticipantState

logger = logging.getLogger(__name__)


def accuracy(preds, labels) -> float:
    """Fraction of correct predictions.

    ``preds`` is either a score matrix [n x C] (argmax, lowest index on ties)
    or a vector of positive-class scores thresholded at 0.5.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise InputError("accuracy needs at least one sample")
    if p.shape[0] != y.shape[0]:
        raise ShapeError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    predicted = np.argmax(p, axis=1) if p.ndim == 2 else (p >= 0.5).astype(np.int64)
    return float(np.mean(predicted == y))


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) ROC AUC with average ranks for ties; NaN if one class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("auc needs one score per binary label")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(np.count_nonzero(y == 0))
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mse(probabilities, labels) -> float:
    """Brier score of the positive-class probability against {0, 1} labels."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ShapeError("mse needs one probability per label")
    return float(np.mean((p - y) ** 2))


def infer_edge(p: ParticipantState, sample_ids) -> Tuple[np.ndarray, np.ndarray]:
    """Edge-based inference: fresh device embedding plus the stored cloud embedding.

    Returns:
        Class probabilities and the rows whose cloud embedding was zero-filled.
    """
    ids = np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))
    inputs, missing = p.classifier_input(p.embed(ids), ids)
    return softmax(forward(p.classifier, inputs)), missing


def infer_cloud(cloud: CloudState, device_id: int, sample_ids) -> Tuple[np.ndarray, np.ndarray]:
    """Cloud-based inference: fresh cloud embedding plus the stored device embedding."""
    ids = np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))
    logits, missing = cloud.predict_logits(device_id, ids)
    return softmax(logits), missing


class DeviceMetrics(BaseModel):
    device_id: int
    num_test: int
    edge_accuracy: float
    edge_auc: Optional[float] = None
    edge_mse: Optional[float] = None
    cloud_accuracy: Optional[float] = None
    cloud_auc: Optional[float] = None
    cloud_mse: Optional[float] = None
    train_loss: Optional[float] = None
    model_version: int = 0
    selected: bool = False
    communicated: bool = False
    epochs: int = 0
    edge_zero_filled: int = 0
    cloud_zero_filled: int = 0
    teacher_missing: bool = False


class RoundReport(BaseModel):
    """Metrics of one round; round -1 holds the metrics at initialization."""

    round: int
    method: str
    devices: List[DeviceMetrics]
    edge_accuracy_mean: float
    edge_accuracy_std: float
    edge_accuracy_pooled: float
    cloud_accuracy_mean: Optional[float] = None
    cloud_accuracy_std: Optional[float] = None
    cloud_accuracy_pooled: Optional[float] = None
    edge_auc_mean: Optional[float] = None
    edge_mse_mean: Optional[float] = None
    cloud_auc_mean: Optional[float] = None
    cloud_mse_mean: Optional[float] = None
    train_loss_mean: Optional[float] = None
    cloud_loss: Optional[float] = None
    cloud_version: Optional[int] = None
    cloud_skipped: bool = False
    staleness_edge: Optional[float] = None
    staleness_cloud: Optional[float] = None
    packets_up: int = 0
    packets_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    join_errors: int = 0
    zero_filled_devices: int = 0


@dataclass
class RoundStats:
    """What happened in a round besides the model updates."""

    selected: Set[int] = field(default_factory=set)
    communicated: Set[int] = field(default_factory=set)
    epochs: Dict[int, int] = field(default_factory=dict)
    packets_up: int = 0
    packets_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


def _binary_metrics(probs: np.ndarray, labels: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    if probs.shape[1] != 2:
        return None, None
    value = auc(probs[:, 1], labels)
    return (None if np.isnan(value) else value), mse(probs[:, 1], labels)


def device_metrics(p: ParticipantState, cloud: Optional[CloudState], stats: RoundStats) -> DeviceMetrics:
    ids = p.test_ids
    y = p.view.labels[ids]
    probs, edge_missing = infer_edge(p, ids)
    edge_auc, edge_mse = _binary_metrics(probs, y)
    metrics = DeviceMetrics(
        device_id=p.device_id,
        num_test=len(ids),
        edge_accuracy=accuracy(probs, y),
        edge_auc=edge_auc,
        edge_mse=edge_mse,
        train_loss=p.last_loss,
        model_version=p.model_version,
        selected=p.device_id in stats.selected,
        communicated=p.device_id in stats.communicated,
        epochs=stats.epochs.get(p.device_id, 0),
        edge_zero_filled=int(np.count_nonzero(edge_missing)) if p.fused else 0,
        teacher_missing=p.teacher_missing
    )
    if cloud is not None:
        cloud_probs, cloud_missing = infer_cloud(cloud, p.device_id, ids)
        metrics.cloud_accuracy = accuracy(cloud_probs, y)
        metrics.cloud_auc, metrics.cloud_mse = _binary_metrics(cloud_probs, y)
        metrics.cloud_zero_filled = int(np.count_nonzero(cloud_missing))
    return metrics


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def pooled_accuracy(accuracies: Sequence[float], counts: Sequence[int]) -> float:
    """Accuracy over all pooled samples from per-device accuracies and sample counts."""
    correct = np.round(np.asarray(accuracies, dtype=np.float64) * np.asarray(counts, dtype=np.float64))
    return float(correct.sum() / np.sum(counts))


def _staleness(participants: Sequence[ParticipantState], cloud: Optional[CloudState]) -> Tuple[Optional[float], Optional[float]]:
    if cloud is None:
        return None, None
    edge_lags, cloud_lags = [], []
    for p in participants:
        if p.store is not None and len(p.store):
            edge_lags.append(float(np.mean(cloud.model_version - p.store.stored_versions())))
        store = cloud.stores[p.device_id]
        if len(store):
            cloud_lags.append(float(np.mean(p.model_version - store.stored_versions())))
    return _mean(edge_lags), _mean(cloud_lags)


def build_round_report(
        round_idx: int,
        method: str,
        participants: Sequence[ParticipantState],
        cloud: Optional[CloudState],
        stats: RoundStats
) -> RoundReport:
    """Evaluates every device on its local test split under both inference strategies."""
    devices = [device_metrics(p, cloud, stats) for p in participants]
    counts = [d.num_test for d in devices]
    edge_acc = [d.edge_accuracy for d in devices]
    staleness_edge, staleness_cloud = _staleness(participants, cloud)

    report = RoundReport(
        round=round_idx,
        method=method,
        devices=devices,
        edge_accuracy_mean=float(np.mean(edge_acc)),
        edge_accuracy_std=float(np.std(edge_acc)),
        edge_accuracy_pooled=pooled_accuracy(edge_acc, counts),
        edge_auc_mean=_mean([d.edge_auc for d in devices]),
        edge_mse_mean=_mean([d.edge_mse for d in devices]),
        train_loss_mean=_mean([d.train_loss for d in devices if d.device_id in stats.selected]),
        staleness_edge=staleness_edge,
        staleness_cloud=staleness_cloud,
        packets_up=stats.packets_up,
        packets_down=stats.packets_down,
        bytes_up=stats.bytes_up,
        bytes_down=stats.bytes_down,
        zero_filled_devices=sum(1 for d in devices if d.edge_zero_filled > 0)
    )
    if cloud is not None:
        cloud_acc = [d.cloud_accuracy for d in devices]
        report.cloud_accuracy_mean = float(np.mean(cloud_acc))
        report.cloud_accuracy_std = float(np.std(cloud_acc))
        report.cloud_accuracy_pooled = pooled_accuracy(cloud_acc, counts)
        report.cloud_auc_mean = _mean([d.cloud_auc for d in devices])
        report.cloud_mse_mean = _mean([d.cloud_mse for d in devices])
        report.cloud_loss = cloud.last_loss
        report.cloud_version = cloud.model_version
        report.cloud_skipped = cloud.skipped
        report.join_errors = cloud.join_errors
    if any(d.edge_auc is None for d in devices) and devices[0].edge_mse is not None:
        logger.warning(f"Round {round_idx}: AUC undefined on devices with a single-class test split")
    return report
