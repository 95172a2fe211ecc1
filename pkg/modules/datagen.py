"""Module for generating, loading and partitioning feature-split datasets."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import entropy

import config
from modules import seeding
from modules.errors import ConfigError, InputError, PartitionError, SchemaError, ShapeError

logger = logging.getLogger(__name__)

FEATURE_SETTINGS = ("F", "C2F", "CandF")


def _as_columns(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureSplitDataset:
    """Samples with federated (edge) features, centralized (cloud) features and a label."""

    x_fed: np.ndarray  # [N x d_f]
    x_cen: np.ndarray  # [N x d_c]
    labels: np.ndarray  # [N]
    num_classes: int
    fed_columns: Tuple[str, ...] = ()
    cen_columns: Tuple[str, ...] = ()
    label_column: str = "label"
    ids: np.ndarray = field(init=False)

    def __post_init__(self):
        x_fed = _as_columns(self.x_fed)
        x_cen = _as_columns(self.x_cen)
        labels = np.asarray(self.labels, dtype=np.int64)
        if x_fed.shape[0] != len(labels) or x_cen.shape[0] != len(labels):
            raise ShapeError("feature matrices and labels disagree on the number of samples")
        if x_fed.shape[1] + x_cen.shape[1] == 0:
            raise ConfigError("a dataset needs at least one feature column")
        if self.num_classes < 1 or np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        missing = set(range(self.num_classes)) - set(np.unique(labels).tolist())
        if missing:
            raise InputError(f"classes {sorted(missing)} have no samples")
        object.__setattr__(self, "x_fed", _readonly(x_fed))
        object.__setattr__(self, "x_cen", _readonly(x_cen))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "ids", _readonly(np.arange(len(labels), dtype=np.int64)))
        if not self.fed_columns:
            object.__setattr__(self, "fed_columns", tuple(f"fed_{i}" for i in range(x_fed.shape[1])))
        if not self.cen_columns:
            object.__setattr__(self, "cen_columns", tuple(f"cen_{i}" for i in range(x_cen.shape[1])))

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def fed_dim(self) -> int:
        return int(self.x_fed.shape[1])

    @property
    def cen_dim(self) -> int:
        return int(self.x_cen.shape[1])


@dataclass(frozen=True)
class CsvSchema:
    federated: Tuple[str, ...]
    centralized: Tuple[str, ...]
    label: str = "label"


@dataclass(frozen=True)
class DevicePartition:
    """Per-device sample ids, each split into a local train and test set."""

    train: Dict[int, np.ndarray]
    test: Dict[int, np.ndarray]
    test_ratio: float

    def __post_init__(self):
        seen = set()
        for k in range(self.num_devices):
            if len(self.train[k]) < 1 or len(self.test[k]) < 1:
                raise PartitionError(f"device {k} needs at least one train and one test sample")
            ids = set(self.train[k].tolist()) | set(self.test[k].tolist())
            if len(ids) != len(self.train[k]) + len(self.test[k]) or seen & ids:
                raise PartitionError(f"device {k} shares samples with another split")
            seen |= ids

    @property
    def num_devices(self) -> int:
        return len(self.train)

    @property
    def assignments(self) -> Dict[int, np.ndarray]:
        return {k: np.sort(np.concatenate([self.train[k], self.test[k]])) for k in range(self.num_devices)}

    def all_train_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train[k] for k in range(self.num_devices)]))


@dataclass(frozen=True)
class FeatureView:
    """What each role sees under a feature setting (F, C2F or CandF)."""

    setting: str
    device_matrix: np.ndarray
    cloud_matrix: np.ndarray
    labels: np.ndarray
    num_classes: int

    @property
    def device_dim(self) -> int:
        return int(self.device_matrix.shape[1])

    @property
    def cloud_dim(self) -> int:
        return int(self.cloud_matrix.shape[1])

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    def device_features(self, ids) -> np.ndarray:
        return self.device_matrix[np.asarray(ids, dtype=np.int64)]

    def cloud_features(self, ids) -> np.ndarray:
        return self.cloud_matrix[np.asarray(ids, dtype=np.int64)]

    def sample(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.device_matrix[i], self.cloud_matrix[i]


def generate_synthetic(
        num_classes: int = config.NUM_CLASSES,
        num_samples: int = config.NUM_SAMPLES,
        fed_dim: int = config.FED_DIM,
        cen_dim: int = config.CEN_DIM,
        class_separation: float = config.CLASS_SEPARATION,
        seed: int = config.SEED
) -> FeatureSplitDataset:
    """Generates a Gaussian-mixture task and splits every sample's features.

    Each class mean has norm ``class_separation`` in the full feature space.
    When there are no more classes than dimensions the means are orthogonal,
    so both feature halves carry part of every mean. Samples have unit
    variance around their mean; the first ``fed_dim`` coordinates become
    federated features and the remaining ``cen_dim`` centralized ones.

    Args:
        num_classes: Number of classes C (>= 2).
        num_samples: Number of samples N (>= C).
        fed_dim: Federated feature count d_f.
        cen_dim: Centralized feature count d_c.
        class_separation: Norm of every class mean.
        seed: Seed of the data stream.

    Returns:
        FeatureSplitDataset with balanced labels.
    """
    if num_classes < 2 or num_samples < num_classes or fed_dim < 0 or cen_dim < 0 or fed_dim + cen_dim < 2:
        raise ConfigError(
            f"invalid synthetic task: C={num_classes}, N={num_samples}, d_f={fed_dim}, d_c={cen_dim}"
        )
    if class_separation < 0:
        raise ConfigError("class_separation must be non-negative")

    rng = seeding.rng_for(seed, seeding.DATA)
    dim = fed_dim + cen_dim
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        directions = q.T
    else:
        g = rng.standard_normal((num_classes, dim))
        directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    means = class_separation * directions

    labels = rng.permutation(np.arange(num_samples) % num_classes)
    x = means[labels] + rng.standard_normal((num_samples, dim))

    logger.info(f"Generated synthetic task: C={num_classes}, N={num_samples}, d_f={fed_dim}, d_c={cen_dim}")
    return FeatureSplitDataset(x_fed=x[:, :fed_dim], x_cen=x[:, fed_dim:], labels=labels, num_classes=num_classes)


def standardize(dataset: FeatureSplitDataset, train_ids: Optional[Sequence[int]] = None) -> FeatureSplitDataset:
    """Z-scores every column with statistics of the training rows only.

    Columns whose training variance is at or below the floor become zero.
    """
    rows = dataset.ids if train_ids is None else np.asarray(train_ids, dtype=np.int64)

    def scale(x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 0:
            return x
        mean = x[rows].mean(axis=0)
        var = x[rows].var(axis=0)
        z = (x - mean) / np.sqrt(np.maximum(var, config.VARIANCE_FLOOR))
        z[:, var <= config.VARIANCE_FLOOR] = 0.0
        return z

    return FeatureSplitDataset(
        x_fed=scale(dataset.x_fed),
        x_cen=scale(dataset.x_cen),
        labels=dataset.labels,
        num_classes=dataset.num_classes,
        fed_columns=dataset.fed_columns,
        cen_columns=dataset.cen_columns,
        label_column=dataset.label_column
    )


def load_csv(
        path: Union[str, Path],
        schema: CsvSchema,
        standardize_columns: bool = True,
        train_ids: Optional[Sequence[int]] = None
) -> FeatureSplitDataset:
    """Loads a feature-split dataset from a CSV file with a header row.

    Args:
        path: CSV file path.
        schema: Which columns are federated, centralized and the label.
        standardize_columns: Z-score the feature columns after parsing.
        train_ids: Rows whose statistics drive standardization (all rows if None).

    Returns:
        FeatureSplitDataset; sample ids follow row order and label values are
        mapped to dense class indices in sorted order.
    """
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise InputError(f"{path} is empty")
    if df.empty:
        raise InputError(f"{path} has a header but no rows")

    needed = list(schema.federated) + list(schema.centralized) + [schema.label]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}")

    parsed = {}
    for column in needed:
        values = pd.to_numeric(df[column], errors="coerce")
        bad = values.isna().to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            # +2: header line and 1-based numbering
            raise InputError(f"{path} line {row + 2}: column '{column}' value {df[column].iloc[row]!r} is not numeric")
        parsed[column] = values.to_numpy(dtype=np.float64)

    raw_labels = parsed[schema.label]
    if not np.all(raw_labels == np.round(raw_labels)):
        raise InputError(f"label column '{schema.label}' must be integer-valued")
    classes, labels = np.unique(raw_labels.astype(np.int64), return_inverse=True)

    n = len(df)
    dataset = FeatureSplitDataset(
        x_fed=np.column_stack([parsed[c] for c in schema.federated]) if schema.federated else np.zeros((n, 0)),
        x_cen=np.column_stack([parsed[c] for c in schema.centralized]) if schema.centralized else np.zeros((n, 0)),
        labels=labels,
        num_classes=len(classes),
        fed_columns=tuple(schema.federated),
        cen_columns=tuple(schema.centralized),
        label_column=schema.label
    )
    logger.info(f"Loaded {n} rows from {path} (d_f={dataset.fed_dim}, d_c={dataset.cen_dim}, C={dataset.num_classes})")
    if standardize_columns:
        dataset = standardize(dataset, train_ids)
    return dataset


def write_csv(dataset: FeatureSplitDataset, path: Union[str, Path]) -> Path:
    """Exports the dataset with the same column layout ``load_csv`` reads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        np.hstack([dataset.x_fed, dataset.x_cen]),
        columns=list(dataset.fed_columns) + list(dataset.cen_columns)
    )
    frame[dataset.label_column] = dataset.labels
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {dataset.num_samples} rows to {path}")
    return path


def schema_of(dataset: FeatureSplitDataset) -> CsvSchema:
    return CsvSchema(federated=dataset.fed_columns, centralized=dataset.cen_columns, label=dataset.label_column)


def _split_devices(chunks, test_ratio: float, rng: np.random.Generator) -> DevicePartition:
    train, test = {}, {}
    for k, ids in enumerate(chunks):
        shuffled = rng.permutation(np.asarray(ids, dtype=np.int64))
        n_test = min(max(1, int(round(len(shuffled) * test_ratio))), len(shuffled) - 1)
        test[k] = np.sort(shuffled[:n_test])
        train[k] = np.sort(shuffled[n_test:])
    return DevicePartition(train=train, test=test, test_ratio=test_ratio)


def _check_partition_args(dataset: FeatureSplitDataset, num_devices: int, test_ratio: float) -> None:
    if num_devices < 1:
        raise ConfigError("num_devices must be positive")
    if dataset.num_samples < 2 * num_devices:
        raise ConfigError(f"{dataset.num_samples} samples cannot give {num_devices} devices a train and a test sample")
    if not 0.0 < test_ratio < 1.0:
        raise ConfigError("test_ratio must lie in (0, 1)")


def partition_iid(
        dataset: FeatureSplitDataset,
        num_devices: int,
        seed: int = config.SEED,
        test_ratio: float = config.TEST_RATIO
) -> DevicePartition:
    """Random permutation cut into equal chunks (remainder on the first devices)."""
    _check_partition_args(dataset, num_devices, test_ratio)
    rng = seeding.rng_for(seed, seeding.PARTITION)
    chunks = np.array_split(rng.permutation(dataset.ids), num_devices)
    return _split_devices(chunks, test_ratio, rng)


def partition_dirichlet(
        dataset: FeatureSplitDataset,
        num_devices: int,
        alpha: float = config.DIRICHLET_ALPHA,
        seed: int = config.SEED,
        test_ratio: float = config.TEST_RATIO,
        max_retries: int = config.DIRICHLET_MAX_RETRIES
) -> DevicePartition:
    """Per-class Dirichlet(alpha) proportions over devices, multinomial assignment.

    The whole draw is repeated until every device holds at least two samples
    (one train, one test); after ``max_retries`` failed draws a
    PartitionError is raised.
    """
    _check_partition_args(dataset, num_devices, test_ratio)
    if alpha <= 0:
        raise ConfigError("dirichlet alpha must be positive")
    rng = seeding.rng_for(seed, seeding.PARTITION)
    if num_devices == 1:
        return _split_devices([dataset.ids], test_ratio, rng)

    by_class = [dataset.ids[dataset.labels == c] for c in range(dataset.num_classes)]
    for attempt in range(max_retries):
        chunks = [[] for _ in range(num_devices)]
        for class_ids in by_class:
            shuffled = rng.permutation(class_ids)
            proportions = rng.dirichlet(np.full(num_devices, alpha))
            if not np.all(np.isfinite(proportions)):
                break
            counts = rng.multinomial(len(shuffled), proportions / proportions.sum())
            for k, part in enumerate(np.split(shuffled, np.cumsum(counts)[:-1])):
                chunks[k].append(part)
        else:
            merged = [np.concatenate(parts) for parts in chunks]
            if min(len(m) for m in merged) >= 2:
                return _split_devices(merged, test_ratio, rng)
        logger.debug(f"Dirichlet draw {attempt + 1} left a device without enough samples, redrawing")
    raise PartitionError(f"no valid Dirichlet(alpha={alpha}) partition for {num_devices} devices in {max_retries} draws")


def feature_view(dataset: FeatureSplitDataset, setting: str) -> FeatureView:
    """F: devices x_fed, cloud nothing. C2F: devices [x_fed, x_cen], cloud nothing. CandF: devices x_fed, cloud x_cen."""
    empty = np.zeros((dataset.num_samples, 0))
    if setting == "F":
        device, cloud = dataset.x_fed, empty
    elif setting == "C2F":
        device, cloud = np.hstack([dataset.x_fed, dataset.x_cen]), empty
    elif setting == "CandF":
        device, cloud = dataset.x_fed, dataset.x_cen
    else:
        raise ConfigError(f"unknown feature setting '{setting}', expected one of {FEATURE_SETTINGS}")
    return FeatureView(
        setting=setting,
        device_matrix=_readonly(device),
        cloud_matrix=_readonly(cloud),
        labels=dataset.labels,
        num_classes=dataset.num_classes
    )


def label_histogram(dataset: FeatureSplitDataset, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    labels = dataset.labels if ids is None else dataset.labels[np.asarray(ids, dtype=np.int64)]
    counts = np.bincount(labels, minlength=dataset.num_classes).astype(np.float64)
    return counts / counts.sum()


def chi_squared_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric chi-squared distance ``0.5 * sum (p - q)^2 / (p + q)``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    denom = p + q
    nz = denom > 0
    return float(0.5 * np.sum((p[nz] - q[nz]) ** 2 / denom[nz]))


def mean_label_entropy(dataset: FeatureSplitDataset, partition: DevicePartition) -> float:
    """Mean over devices of the (natural-log) entropy of the local label distribution."""
    return float(np.mean([
        entropy(label_histogram(dataset, ids)) for ids in partition.assignments.values()
    ]))
