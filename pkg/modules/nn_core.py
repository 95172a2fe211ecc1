"""Module for the dense-network engine used by every edge and cloud model.

A ``DenseNet`` is an ordered list of fully connected layers with relu or
identity activations. Gradients are computed analytically by ``backward``;
there is no autograd graph. All arithmetic is float64.
"""

import copy
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson

import config
from modules.errors import InputError, ShapeError, StateError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
OPTIMIZER_KINDS = ("sgd", "sgd_momentum", "adam")
CHECKPOINT_MAGIC = b"DNET"


@dataclass
class DenseLayer:
    """One affine map ``activation(x @ weight.T + bias)``."""

    weight: np.ndarray  # [out x in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


@dataclass
class DenseNet:
    """Multi-layer perceptron with a per-network forward cache."""

    layers: List[DenseLayer]
    cache: Optional[ForwardCache] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("DenseNet needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.weight = np.array(layer.weight, dtype=np.float64)
            layer.bias = np.array(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: weight {layer.weight.shape} and bias {layer.bias.shape} do not match")
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation '{layer.activation}'")
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise ShapeError(f"layer {i}: dimensions must be positive")
            if i > 0 and self.layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {i - 1} outputs {self.layers[i - 1].out_dim} values but layer {i} expects {layer.in_dim}"
                )
        if not all(np.all(np.isfinite(a)) for a in param_arrays(self)):
            raise InputError("DenseNet parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(a.size for a in param_arrays(self))

    def architecture(self) -> Dict[str, Any]:
        return {
            "layers": [
                {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
                for layer in self.layers
            ]
        }


@dataclass
class GradientSet:
    """Per-layer weight and bias gradients of one DenseNet."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for gw, gb in zip(self.weights, self.biases):
            out.extend([gw, gb])
        return out

    def check_congruent(self, net: DenseNet) -> None:
        if len(self.weights) != len(net.layers) or len(self.biases) != len(net.layers):
            raise ShapeError(f"gradient has {len(self.weights)} layers, network has {len(net.layers)}")
        for i, (layer, gw, gb) in enumerate(zip(net.layers, self.weights, self.biases)):
            if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
                raise ShapeError(f"layer {i}: gradient shapes {gw.shape}/{gb.shape} do not match the network")

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


@dataclass
class Optimizer:
    """First-order optimizer with lazily allocated per-parameter state."""

    kind: str = config.OPTIMIZER
    learning_rate: float = config.LEARNING_RATE
    momentum: float = config.MOMENTUM
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    step_count: int = 0
    state: Optional[List[Dict[str, np.ndarray]]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer '{self.kind}'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def param_arrays(net: DenseNet) -> List[np.ndarray]:
    """Parameter arrays in canonical order: layer-major, weight then bias."""
    arrays = []
    for layer in net.layers:
        arrays.extend([layer.weight, layer.bias])
    return arrays


def build_dense_net(
        input_dim: int,
        hidden_widths: Sequence[int],
        output_dim: int,
        rng: np.random.Generator,
        output_activation: str = "identity"
) -> DenseNet:
    """Builds a seeded MLP.

    Hidden layers use relu with He-uniform weights; the output layer uses
    ``output_activation`` (Xavier-uniform when identity). Biases start at zero.

    Args:
        input_dim: Number of input features.
        hidden_widths: Widths of the hidden relu layers (may be empty).
        output_dim: Number of outputs.
        rng: Generator used for the weight draws.
        output_activation: Activation of the last layer.

    Returns:
        A freshly initialized DenseNet.
    """
    dims = [int(input_dim)] + [int(w) for w in hidden_widths] + [int(output_dim)]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        activation = "relu" if i < len(dims) - 2 else output_activation
        if activation == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(weight=weight, bias=np.zeros(fan_out), activation=activation))
    return DenseNet(layers)


def clone_net(net: DenseNet) -> DenseNet:
    return DenseNet([copy.deepcopy(layer) for layer in net.layers])


def forward(net: DenseNet, batch: Union[np.ndarray, Sequence]) -> np.ndarray:
    """Evaluates the network and caches the activations for ``backward``.

    Args:
        net: The network.
        batch: Real matrix [B x input_dim]; a single vector is treated as B=1.

    Returns:
        Output matrix [B x output_dim] (a vector for vector input).
    """
    x = np.asarray(batch, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"batch has shape {x.shape}, network expects {net.input_dim} columns")
    if not np.all(np.isfinite(x)):
        raise InputError("batch contains non-finite values")

    inputs, pre_activations = [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        pre_activations.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    net.cache = ForwardCache(inputs=inputs, pre_activations=pre_activations)
    return a[0] if squeeze else a


def backward(net: DenseNet, upstream: Union[np.ndarray, Sequence]) -> Tuple[GradientSet, np.ndarray]:
    """Backpropagates ``upstream`` through the last forward pass.

    Args:
        net: The network, after ``forward``.
        upstream: Partial derivatives of a scalar w.r.t. the outputs [B x output_dim].

    Returns:
        The parameter gradients and the gradient w.r.t. the inputs [B x input_dim].
    """
    if net.cache is None:
        raise StateError("backward called before forward")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    batch_rows = net.cache.inputs[0].shape[0]
    if g.shape[0] != batch_rows:
        raise StateError(f"upstream has {g.shape[0]} rows, last forward had {batch_rows}")
    if g.shape[1] != net.output_dim:
        raise ShapeError(f"upstream has {g.shape[1]} columns, network outputs {net.output_dim}")

    grad_w: List[np.ndarray] = [None] * len(net.layers)
    grad_b: List[np.ndarray] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            g = g * (net.cache.pre_activations[i] > 0.0)
        grad_w[i] = g.T @ net.cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ layer.weight
    return GradientSet(weights=grad_w, biases=grad_b), g


def apply_update(net: DenseNet, grads: GradientSet, opt: Optimizer) -> None:
    """Applies one optimizer step in place and increments the step count.

    The step is computed in full before anything is written; a step that
    would produce non-finite parameters raises StateError and leaves the
    network and the optimizer state untouched.
    """
    grads.check_congruent(net)
    params = param_arrays(net)
    gs = grads.arrays()
    state = opt.state
    if state is None:
        state = [{"m": np.zeros_like(p), "v": np.zeros_like(p)} for p in params]
    elif len(state) != len(params) or any(s["m"].shape != p.shape for s, p in zip(state, params)):
        raise ShapeError("optimizer state does not match the network")

    t = opt.step_count + 1
    lr = opt.learning_rate
    new_params, new_state = [], []
    for p, g, s in zip(params, gs, state):
        if opt.kind == "sgd":
            m, v = s["m"], s["v"]
            step = lr * g
        elif opt.kind == "sgd_momentum":
            m, v = opt.momentum * s["m"] + g, s["v"]
            step = lr * m
        else:
            m = opt.beta1 * s["m"] + (1.0 - opt.beta1) * g
            v = opt.beta2 * s["v"] + (1.0 - opt.beta2) * (g * g)
            m_hat = m / (1.0 - opt.beta1 ** t)
            v_hat = v / (1.0 - opt.beta2 ** t)
            step = lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_params.append(p - step)
        new_state.append({"m": m, "v": v})
    if not all(np.all(np.isfinite(p)) for p in new_params):
        raise StateError(f"non-finite parameters after optimizer step {t}")

    for p, value in zip(params, new_params):
        p[...] = value
    opt.state = new_state
    opt.step_count = t


def serialize_params(net: DenseNet) -> np.ndarray:
    """Flat parameter vector: layer-major, row-major weights, then bias."""
    return np.concatenate([a.ravel() for a in param_arrays(net)])


def deserialize_params(net: DenseNet, vector: Union[np.ndarray, Sequence]) -> None:
    vec = np.asarray(vector, dtype=np.float64)
    if vec.ndim != 1 or vec.size != net.num_params:
        raise ShapeError(f"parameter vector has {vec.size} values, network has {net.num_params}")
    offset = 0
    for a in param_arrays(net):
        a[...] = vec[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    net.cache = None


def params_checksum(net: DenseNet) -> str:
    return hashlib.sha256(serialize_params(net).astype("<f8").tobytes()).hexdigest()


def save_checkpoint(net: DenseNet, path: Union[str, Path]) -> Path:
    """Writes magic, header length, JSON architecture header and ``<f8`` parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(net.architecture(), num_params=net.num_params, dtype="<f8")
    header_bytes = orjson.dumps(header, option=orjson.OPT_SORT_KEYS)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(serialize_params(net).astype("<f8").tobytes())
    logger.debug(f"Saved checkpoint {path} ({net.num_params} parameters)")
    return path


def load_checkpoint(path: Union[str, Path]) -> DenseNet:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path} is not a DenseNet checkpoint")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = orjson.loads(raw[8:8 + header_len])
    layers = [
        DenseLayer(weight=np.zeros((entry["out"], entry["in"])), bias=np.zeros(entry["out"]), activation=entry["activation"])
        for entry in header["layers"]
    ]
    net = DenseNet(layers)
    values = np.frombuffer(raw[8 + header_len:], dtype="<f8")
    deserialize_params(net, values)
    return net
