"""Module for checking analytic gradients against central finite differences."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules.errors import InputError
from modules.losses import LossConfig, cross_entropy, device_loss, filtered_mask, kd_divergence, server_loss
from modules.nn_core import DenseNet, backward, build_dense_net, forward, param_arrays
from modules.participants import fuse

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
ABS_TOLERANCE = 1e-9  # round-off floor of a central difference at h=1e-5
KINK_MARGIN = 1e-3
MAX_REDRAWS = 100
LOSS_KINDS = ("sum", "ce", "kd", "filtered_kd", "device_loss", "server_loss")
TEMPERATURES = (1.0, 2.0, 4.0)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_gradients(nets: Sequence[DenseNet], loss_fn: Callable[[], float], h: float = STEP) -> List[np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every parameter, perturbed in place."""
    grads = []
    for net in nets:
        for p in param_arrays(net):
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                saved = p[idx]
                p[idx] = saved + h
                plus = loss_fn()
                p[idx] = saved - h
                minus = loss_fn()
                p[idx] = saved
                g[idx] = (plus - minus) / (2.0 * h)
            grads.append(g)
    return grads


def near_kink(net: DenseNet, batch: np.ndarray, margin: float = KINK_MARGIN) -> bool:
    """Whether any relu pre-activation of ``batch`` lies within ``margin`` of zero."""
    forward(net, batch)
    return any(
        layer.activation == "relu" and np.any(np.abs(z) < margin)
        for layer, z in zip(net.layers, net.cache.pre_activations)
    )


def _compare(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> Tuple[float, bool]:
    worst, passed = 0.0, True
    for a, n in zip(analytic, numeric):
        rel = relative_error(a, n)
        worst = max(worst, float(rel.max(initial=0.0)))
        passed = passed and bool(np.all((rel <= TOLERANCE) | (np.abs(a - n) <= ABS_TOLERANCE)))
    return worst, passed


def gradcheck_net(net: DenseNet, batch, upstream, h: float = STEP) -> float:
    """Max relative error of ``backward`` for the scalar ``sum(forward(net, batch) * upstream)``."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    u = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    forward(net, x)
    grads, _ = backward(net, u)
    numeric = numerical_gradients([net], lambda: float(np.sum(forward(net, x) * u)), h)
    return _compare(grads.arrays(), numeric)[0]


@dataclass
class GradcheckResult:
    index: int
    kind: str
    num_params: int
    batch_size: int
    max_error: float
    passed: bool


def _random_net(rng: np.random.Generator, input_dim: int, output_dim: int, max_layers: int = 4) -> DenseNet:
    hidden = [int(w) for w in rng.integers(1, 33, size=int(rng.integers(0, max_layers)))]
    net = build_dense_net(input_dim, hidden, output_dim, rng)
    # zero biases would put units behind a dead layer exactly on the relu kink
    for layer in net.layers:
        layer.bias[...] = rng.uniform(-0.5, 0.5, size=layer.bias.shape)
    return net


def _draw_batch(rng: np.random.Generator, nets_inputs: Callable[[np.ndarray], bool], shape: Tuple[int, int]) -> np.ndarray:
    for _ in range(MAX_REDRAWS):
        x = rng.standard_normal(shape)
        if not nets_inputs(x):
            return x
    raise InputError("could not draw a batch away from relu kinks")


def _check_single_net(kind: str, rng: np.random.Generator) -> Tuple[List[DenseNet], List[np.ndarray], List[np.ndarray], int]:
    batch_size = int(rng.integers(1, 9))
    num_classes = int(rng.integers(2, 6))
    in_dim = int(rng.integers(1, 9))
    net = _random_net(rng, in_dim, num_classes)
    x = _draw_batch(rng, lambda b: near_kink(net, b), (batch_size, in_dim))
    labels = rng.integers(0, num_classes, size=batch_size)
    teacher = 2.0 * rng.standard_normal((batch_size, num_classes))
    temperature = float(rng.choice(TEMPERATURES))

    if kind == "sum":
        upstream = rng.standard_normal((batch_size, num_classes))

        def loss_and_grad(z):
            return float(np.sum(z * upstream)), upstream
    elif kind == "ce":
        def loss_and_grad(z):
            return cross_entropy(z, labels)
    elif kind == "kd":
        def loss_and_grad(z):
            return kd_divergence(z, teacher, temperature)
    else:
        # make roughly half of the rows correct so the filter selects a proper subset
        correct = rng.random(batch_size) < 0.5
        labels = np.where(correct, np.argmax(teacher, axis=1), labels)
        mask = filtered_mask(teacher, labels)

        def loss_and_grad(z):
            return kd_divergence(z, teacher, temperature, mask)

    _, g = loss_and_grad(forward(net, x))
    grads, _ = backward(net, g)
    numeric = numerical_gradients([net], lambda: loss_and_grad(forward(net, x))[0])
    return [net], grads.arrays(), numeric, batch_size


def _random_loss_config(rng: np.random.Generator) -> LossConfig:
    return LossConfig(
        alpha_s=float(rng.uniform(0.1, 2.0)),
        alpha_d=float(rng.uniform(0.1, 2.0)),
        kd_temperature=float(rng.choice(TEMPERATURES)),
        two_stage_switch_round=0,
        filtered_kd=bool(rng.random() < 0.5),
        server_kd_reduction=str(rng.choice(["mean", "sum"]))
    )


def _check_device_loss(rng: np.random.Generator):
    batch_size = int(rng.integers(1, 9))
    num_classes = int(rng.integers(2, 6))
    in_dim = int(rng.integers(1, 9))
    d_e = int(rng.integers(1, 6))
    encoder = _random_net(rng, in_dim, d_e, max_layers=3)
    classifier = _random_net(rng, 2 * d_e, num_classes, max_layers=3)
    h_s = rng.standard_normal((batch_size, d_e))
    server_logits = 2.0 * rng.standard_normal((batch_size, num_classes))
    labels = rng.integers(0, num_classes, size=batch_size)
    cfg = _random_loss_config(rng)

    def kinked(x):
        return near_kink(encoder, x) or near_kink(classifier, fuse(forward(encoder, x), h_s)[0])

    x = _draw_batch(rng, kinked, (batch_size, in_dim))

    def run():
        inputs, _ = fuse(forward(encoder, x), h_s)
        return device_loss(forward(classifier, inputs), server_logits, labels, cfg, round_idx=0)

    result = run()
    cls_grads, input_grad = backward(classifier, result.grad)
    enc_grads, _ = backward(encoder, input_grad[:, :d_e])
    numeric = numerical_gradients([encoder, classifier], lambda: run().value)
    return [encoder, classifier], enc_grads.arrays() + cls_grads.arrays(), numeric, batch_size


def _check_server_loss(rng: np.random.Generator):
    num_groups = int(rng.integers(1, 4))
    sizes = [int(s) for s in rng.integers(1, 5, size=num_groups)]
    num_classes = int(rng.integers(2, 6))
    in_dim = int(rng.integers(1, 9))
    net = _random_net(rng, in_dim, num_classes)
    x = _draw_batch(rng, lambda b: near_kink(net, b), (sum(sizes), in_dim))
    teachers = [2.0 * rng.standard_normal((n, num_classes)) for n in sizes]
    labels = [rng.integers(0, num_classes, size=n) for n in sizes]
    cfg = _random_loss_config(rng)
    num_devices = num_groups + int(rng.integers(0, 3))
    splits = np.cumsum(sizes)[:-1]

    def run():
        z = forward(net, x)
        return server_loss(np.split(z, splits), teachers, labels, cfg, round_idx=0, num_devices=num_devices)[0]

    grads, _ = backward(net, run().grad)
    numeric = numerical_gradients([net], lambda: run().value)
    return [net], grads.arrays(), numeric, sum(sizes)


def check_configuration(index: int, kind: str, seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng([seed, index])
    if kind == "device_loss":
        nets, analytic, numeric, batch_size = _check_device_loss(rng)
    elif kind == "server_loss":
        nets, analytic, numeric, batch_size = _check_server_loss(rng)
    elif kind in LOSS_KINDS:
        nets, analytic, numeric, batch_size = _check_single_net(kind, rng)
    else:
        raise InputError(f"unknown gradient check kind '{kind}'")
    worst, passed = _compare(analytic, numeric)
    return GradcheckResult(
        index=index,
        kind=kind,
        num_params=sum(n.num_params for n in nets),
        batch_size=batch_size,
        max_error=worst,
        passed=passed
    )


def run_gradcheck_suite(n_configs: int = 200, seed: int = 0, kinds: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Checks ``n_configs`` random (net, batch, loss) configurations, cycling through the loss kinds.

    Returns:
        One row per configuration with its maximum relative error and verdict.
    """
    kinds = tuple(kinds or LOSS_KINDS)
    results = [check_configuration(i, kinds[i % len(kinds)], seed) for i in range(n_configs)]
    frame = pd.DataFrame([r.__dict__ for r in results])
    failed = int((~frame["passed"]).sum())
    if failed:
        logger.warning(f"{failed} of {n_configs} gradient checks exceeded the tolerance")
    else:
        logger.info(f"All {n_configs} gradient checks passed (max relative error {frame['max_error'].max():.2e})")
    return frame
