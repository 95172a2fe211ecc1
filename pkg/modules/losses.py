"""Module for the classification and distillation losses of edge and cloud training.

Every loss returns its value together with the gradient w.r.t. the student
logits, so callers feed the gradient straight into ``nn_core.backward``.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

import config
from modules.errors import InputError, ShapeError

logger = logging.getLogger(__name__)


class LossConfig(BaseModel):
    """Loss weights, distillation temperature and the two add-on switches."""

    model_config = ConfigDict(extra="forbid")

    alpha_s: float = Field(default=config.ALPHA_S, ge=0.0)
    alpha_d: float = Field(default=config.ALPHA_D, ge=0.0)
    kd_temperature: float = Field(default=config.KD_TEMPERATURE, gt=0.0)
    two_stage_switch_round: int = Field(default=config.TWO_STAGE_SWITCH_ROUND, ge=0)
    filtered_kd: bool = config.FILTERED_KD
    # KL(teacher || student) by default; the reverse direction is kept for experiments
    kd_direction: Literal["teacher_student", "student_teacher"] = "teacher_student"
    # "mean" divides the per-device KD sum of the cloud objective by the number of devices
    server_kd_reduction: Literal["mean", "sum"] = "mean"


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    ce: float = 0.0
    kd: float = 0.0
    kd_rows: int = 0
    teacher_missing: bool = False


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise InputError("logits contain non-finite values")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature`` (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z)
    if temperature <= 0:
        raise InputError("temperature must be positive")
    return _softmax(z / temperature, axis=-1)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z)
    if temperature <= 0:
        raise InputError("temperature must be positive")
    return _log_softmax(z / temperature, axis=-1)


def _as_matrix(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be a [B x C] matrix, got shape {z.shape}")
    return z


def cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient ``(softmax - onehot) / B``."""
    z = _as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels of shape {y.shape} do not match {z.shape[0]} logit rows")
    if z.shape[0] == 0:
        raise InputError("cross_entropy needs a non-empty batch")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InputError(f"labels must lie in [0, {z.shape[1]})")
    rows = np.arange(z.shape[0])
    logp = log_softmax(z)
    value = float(-np.mean(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    return value, grad


def filtered_mask(teacher_logits, labels) -> np.ndarray:
    """True where the teacher's lowest-index argmax equals the label."""
    t = _as_matrix(teacher_logits)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (t.shape[0],):
        raise ShapeError("teacher logits and labels disagree on the batch size")
    return np.argmax(t, axis=1) == y


def kd_divergence(
        student_logits,
        teacher_logits,
        temperature: float = config.KD_TEMPERATURE,
        mask: Optional[np.ndarray] = None,
        direction: str = "teacher_student"
) -> Tuple[float, np.ndarray]:
    """Temperature-scaled KL divergence between softened teacher and student.

    The value is ``T^2`` times the mean per-row KL over the rows selected by
    ``mask``; the teacher is a constant. An empty selection gives 0 and a zero
    gradient.

    Args:
        student_logits: [B x C] logits receiving the gradient.
        teacher_logits: [B x C] logits of the teacher.
        temperature: Softening temperature T.
        mask: Optional boolean row selection.
        direction: "teacher_student" for KL(teacher || student), else the reverse.

    Returns:
        The divergence and its gradient w.r.t. the student logits.
    """
    s = _as_matrix(student_logits)
    t = _as_matrix(teacher_logits)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    selected = np.ones(s.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if selected.shape != (s.shape[0],):
        raise ShapeError("mask length does not match the batch")
    grad = np.zeros_like(s)
    n = int(selected.sum())
    if n == 0:
        return 0.0, grad

    T = float(temperature)
    log_q = log_softmax(s, T)
    log_p = log_softmax(t, T)
    q = np.exp(log_q)
    p = np.exp(log_p)
    if direction == "teacher_student":
        per_row = np.sum(p * (log_p - log_q), axis=1)
        row_grad = q - p
    elif direction == "student_teacher":
        diff = log_q - log_p
        per_row = np.sum(q * diff, axis=1)
        row_grad = q * (diff - per_row[:, None])
    else:
        raise ValueError(f"unknown KD direction '{direction}'")

    value = float(np.mean(per_row[selected])) * T * T
    grad[selected] = row_grad[selected] * (T / n)
    return max(value, 0.0), grad


def effective_alphas(cfg: LossConfig, round_idx: int) -> Tuple[float, float]:
    """Two-stage schedule: (0, 0) before the switch round, the configured alphas after."""
    if round_idx < cfg.two_stage_switch_round:
        return 0.0, 0.0
    return cfg.alpha_s, cfg.alpha_d


def stage_two(cfg: LossConfig, round_idx: int) -> bool:
    """Whether logits are exchanged (and KD is active) in this round."""
    return round_idx >= cfg.two_stage_switch_round


def _teacher_rows(teacher_logits, labels, cfg: LossConfig, teacher_present: Optional[np.ndarray]) -> np.ndarray:
    rows = np.ones(len(labels), dtype=bool) if teacher_present is None else np.asarray(teacher_present, dtype=bool)
    if cfg.filtered_kd:
        rows = rows & filtered_mask(teacher_logits, labels)
    return rows


def device_loss(
        device_logits,
        server_logits,
        labels,
        cfg: LossConfig,
        round_idx: int,
        teacher_present: Optional[np.ndarray] = None
) -> LossResult:
    """Edge objective ``CE + alpha_d * KD(student=device, teacher=server)``.

    Args:
        device_logits: [B x C] logits of the device classifier.
        server_logits: [B x C] stored cloud logits, or None before any arrived.
        labels: [B] ground-truth labels.
        cfg: Loss configuration.
        round_idx: Current round (drives the two-stage schedule).
        teacher_present: Optional mask of rows that have a stored teacher.

    Returns:
        LossResult with the composite value and gradient.
    """
    ce_value, grad = cross_entropy(device_logits, labels)
    _, alpha_d = effective_alphas(cfg, round_idx)
    if alpha_d == 0.0:
        return LossResult(value=ce_value, grad=grad, ce=ce_value)

    if server_logits is None or (teacher_present is not None and not np.any(teacher_present)):
        return LossResult(value=ce_value, grad=grad, ce=ce_value, teacher_missing=True)

    rows = _teacher_rows(server_logits, labels, cfg, teacher_present)
    kd_value, kd_grad = kd_divergence(device_logits, server_logits, cfg.kd_temperature, rows, cfg.kd_direction)
    return LossResult(
        value=ce_value + alpha_d * kd_value,
        grad=grad + alpha_d * kd_grad,
        ce=ce_value,
        kd=kd_value,
        kd_rows=int(rows.sum())
    )


def server_loss(
        server_logits_per_device: Sequence[np.ndarray],
        device_logits_per_device: Sequence[Optional[np.ndarray]],
        labels_per_device: Sequence[np.ndarray],
        cfg: LossConfig,
        round_idx: int,
        teacher_present_per_device: Optional[Sequence[Optional[np.ndarray]]] = None,
        num_devices: Optional[int] = None
) -> Tuple[LossResult, List[np.ndarray]]:
    """Cloud objective ``CE + alpha_s * sum_k KD(student=server_k, teacher=device_k)``.

    CE is the mean over every row of every device group. The KD sum is divided
    by ``num_devices`` (K) when ``server_kd_reduction == "mean"``; without it the
    groups passed are taken to be all K devices.

    Returns:
        The composite LossResult (its ``grad`` is the concatenation of groups)
        and the gradient split back per device group.
    """
    if not (len(server_logits_per_device) == len(device_logits_per_device) == len(labels_per_device)):
        raise ShapeError("server_loss needs one logits/teacher/labels entry per device")
    if num_devices is not None and num_devices < len(server_logits_per_device):
        raise ShapeError(f"{len(server_logits_per_device)} device groups but num_devices={num_devices}")
    sizes = [np.asarray(z).shape[0] for z in server_logits_per_device]
    all_logits = np.concatenate([_as_matrix(z) for z in server_logits_per_device], axis=0)
    all_labels = np.concatenate([np.asarray(y, dtype=np.int64) for y in labels_per_device])
    ce_value, grad = cross_entropy(all_logits, all_labels)
    result = LossResult(value=ce_value, grad=grad, ce=ce_value)

    alpha_s, _ = effective_alphas(cfg, round_idx)
    if alpha_s > 0.0:
        weight = 1.0 / (num_devices or len(sizes)) if cfg.server_kd_reduction == "mean" else 1.0
        present = teacher_present_per_device or [None] * len(sizes)
        kd_total, any_teacher = 0.0, False
        offset = 0
        for z_s, z_d, y, tp, n in zip(server_logits_per_device, device_logits_per_device, labels_per_device, present, sizes):
            if z_d is None or (tp is not None and not np.any(tp)):
                offset += n
                continue
            any_teacher = True
            rows = _teacher_rows(z_d, y, cfg, tp)
            kd_value, kd_grad = kd_divergence(z_s, z_d, cfg.kd_temperature, rows, cfg.kd_direction)
            kd_total += weight * kd_value
            grad[offset:offset + n] += alpha_s * weight * kd_grad
            result.kd_rows += int(rows.sum())
            offset += n
        result.kd = kd_total
        result.value = ce_value + alpha_s * kd_total
        result.teacher_missing = not any_teacher

    splits = np.cumsum(sizes)[:-1]
    return result, np.split(grad, splits, axis=0)
