"""Module for the run configuration: pydantic models, YAML files and dotted overrides."""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import config
from modules.errors import ConfigError
from modules.losses import LossConfig
from modules.nn_core import Optimizer

logger = logging.getLogger(__name__)

METHODS = ("ecct", "fedavg", "fedgkt", "local")
ASYNC_MODES = ("sync", "asyn_version", "asyn_epoch", "asyn_both")


class DataConfig(BaseModel):
    """Where the samples come from and how they are spread over devices."""

    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "csv"] = "synthetic"
    num_classes: int = Field(default=config.NUM_CLASSES, ge=2)
    num_samples: int = Field(default=config.NUM_SAMPLES, ge=2)
    fed_dim: int = Field(default=config.FED_DIM, ge=0)
    cen_dim: int = Field(default=config.CEN_DIM, ge=0)
    class_separation: float = Field(default=config.CLASS_SEPARATION, ge=0.0)
    csv_path: Optional[str] = None
    federated_columns: List[str] = Field(default_factory=list)
    centralized_columns: List[str] = Field(default_factory=list)
    label_column: str = "label"
    standardize: bool = True
    partition: Literal["iid", "dirichlet"] = "iid"
    dirichlet_alpha: float = Field(default=config.DIRICHLET_ALPHA, gt=0.0)
    test_ratio: float = Field(default=config.TEST_RATIO, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_source(self):
        if self.source == "csv" and not self.csv_path:
            raise ValueError("data.csv_path is required when data.source is 'csv'")
        return self


class ArchitectureConfig(BaseModel):
    """Hidden widths of every network and the shared embedding size."""

    model_config = ConfigDict(extra="forbid")

    embedding_dim: int = Field(default=config.EMBEDDING_DIM, ge=1)
    edge_encoder_widths: List[int] = Field(default_factory=lambda: list(config.EDGE_ENCODER_WIDTHS))
    edge_classifier_widths: List[int] = Field(default_factory=lambda: list(config.EDGE_CLASSIFIER_WIDTHS))
    cloud_encoder_widths: List[int] = Field(default_factory=lambda: list(config.CLOUD_ENCODER_WIDTHS))
    cloud_classifier_widths: List[int] = Field(default_factory=lambda: list(config.CLOUD_CLASSIFIER_WIDTHS))
    # hetero: every edge encoder hidden layer draws its width from the choices per device
    hetero: bool = False
    hetero_width_choices: List[int] = Field(default_factory=lambda: list(config.HETERO_WIDTH_CHOICES))

    @model_validator(mode="after")
    def _check_widths(self):
        widths = (
            self.edge_encoder_widths + self.edge_classifier_widths + self.cloud_encoder_widths
            + self.cloud_classifier_widths + self.hetero_width_choices
        )
        if any(w < 1 for w in widths):
            raise ValueError("hidden widths must be positive")
        if self.hetero and not self.hetero_width_choices:
            raise ValueError("hetero architectures need at least one width choice")
        return self


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["sgd", "sgd_momentum", "adam"] = config.OPTIMIZER
    learning_rate: float = Field(default=config.LEARNING_RATE, gt=0.0)
    momentum: float = Field(default=config.MOMENTUM, ge=0.0, lt=1.0)
    beta1: float = Field(default=config.ADAM_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=config.ADAM_BETA2, ge=0.0, lt=1.0)
    eps: float = Field(default=config.ADAM_EPS, gt=0.0)

    def build(self) -> Optimizer:
        return Optimizer(
            kind=self.kind,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps
        )


class TransferConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    buffer_capacity: int = Field(default=config.BUFFER_CAPACITY, ge=1)
    # cloud-to-edge buffers use the uplink capacity unless set
    downlink_capacity: Optional[int] = Field(default=None, ge=1)
    # edge-to-cloud packets also carry unlabeled test rows for cloud-based inference
    share_test_embeddings: bool = True
    dump_payloads: bool = False

    @property
    def effective_downlink_capacity(self) -> int:
        return self.downlink_capacity or self.buffer_capacity


class PrivacyConfig(BaseModel):
    """Clip-and-noise applied to edge-to-cloud embeddings."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    clip_norm: Optional[float] = Field(default=None, gt=0.0)
    noise_sigma: float = Field(default=0.0, ge=0.0)

    @property
    def effective_clip_norm(self) -> float:
        return math.inf if self.clip_norm is None else self.clip_norm


class TrainingConfig(BaseModel):
    """Full description of one simulated run."""

    model_config = ConfigDict(extra="forbid")

    method: Literal["ecct", "fedavg", "fedgkt", "local"] = "ecct"
    feature_setting: Literal["F", "C2F", "CandF"] = "CandF"
    num_devices: int = Field(default=config.NUM_DEVICES, ge=1)
    rounds: int = Field(default=config.ROUNDS, ge=0)
    device_epochs: int = Field(default=config.DEVICE_EPOCHS, ge=1)
    device_epoch_overrides: Dict[int, int] = Field(default_factory=dict)
    cloud_epochs: int = Field(default=config.CLOUD_EPOCHS, ge=1)
    select_ratio: float = Field(default=config.SELECT_RATIO, gt=0.0, le=1.0)
    async_mode: Literal["sync", "asyn_version", "asyn_epoch", "asyn_both"] = "sync"
    comm_periods: List[int] = Field(default_factory=lambda: list(config.ASYNC_COMM_PERIODS))
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    seed: int = config.SEED
    workers: int = Field(default=config.WORKERS, ge=1)
    progress: bool = True
    save_checkpoints: bool = True

    data: DataConfig = Field(default_factory=DataConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    privacy: PrivacyConfig = Field(default_factory=PrivacyConfig)

    @model_validator(mode="after")
    def _check_topology(self):
        if self.select_ratio * self.num_devices < 1.0 - 1e-12:
            raise ValueError(f"select_ratio {self.select_ratio} selects no device out of {self.num_devices}")
        if any(e < 1 for e in self.device_epoch_overrides.values()):
            raise ValueError("device epochs must be at least 1")
        if any(k < 0 or k >= self.num_devices for k in self.device_epoch_overrides):
            raise ValueError("device_epoch_overrides names a device outside [0, num_devices)")
        if not self.comm_periods or any(f < 1 for f in self.comm_periods):
            raise ValueError("comm_periods must be positive integers")
        return self

    def epochs_for(self, device_id: int) -> int:
        return self.device_epoch_overrides.get(device_id, self.device_epochs)


def validate_for_method(cfg: TrainingConfig) -> None:
    """Checks method/feature-setting compatibility before round 0."""
    if cfg.method == "ecct" and cfg.feature_setting not in ("CandF", "F"):
        raise ConfigError(f"ecct runs under CandF (or F with an empty cloud), not {cfg.feature_setting}")
    if cfg.method in ("fedavg", "fedgkt") and cfg.feature_setting not in ("F", "C2F"):
        raise ConfigError(f"{cfg.method} runs under F or C2F, not {cfg.feature_setting}")
    if cfg.method == "fedavg" and cfg.architecture.hetero:
        raise ConfigError("fedavg averages parameters and needs one shared edge architecture")
    if cfg.data.source == "synthetic" and cfg.data.num_samples < 2 * cfg.num_devices:
        raise ConfigError(f"{cfg.data.num_samples} samples are too few for {cfg.num_devices} devices")


def _parse_value(value: Any) -> Any:
    if isinstance(value, str):
        try:
            return yaml.safe_load(value)
        except yaml.YAMLError:
            return value
    return value


def apply_overrides(cfg: TrainingConfig, overrides: Mapping[str, Any]) -> TrainingConfig:
    """Returns a copy of ``cfg`` with dotted-key overrides applied.

    String values are parsed as YAML scalars, so ``"0.5"`` becomes a float
    and ``"[8, 16]"`` a list.

    Args:
        cfg: The base configuration.
        overrides: Mapping such as ``{"loss.alpha_s": 0.5, "rounds": "10"}``.

    Returns:
        A validated TrainingConfig.
    """
    data = cfg.model_dump()
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"unknown config section '{key}' in override '{dotted}'")
            node = node[key]
        # unknown leaf keys are rejected by the models (extra="forbid")
        node[keys[-1]] = _parse_value(value)
    return build_config(data)


def build_config(data: Optional[Mapping[str, Any]] = None) -> TrainingConfig:
    try:
        return TrainingConfig.model_validate(dict(data or {}))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> TrainingConfig:
    """Reads a YAML config file (nested sections mirror TrainingConfig)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    cfg = build_config(data)
    logger.info(f"Loaded config from {path}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def dump_config(cfg: TrainingConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
