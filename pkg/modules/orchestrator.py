"""Module for the training loops: ECCT, FedAvg, FedGKT-style and isolated local training.

Within a round the cloud and the selected devices train on the knowledge
they already hold; packets produced during the round are exchanged at the
round boundary in device order, so the sequential loop and the threaded one
give identical results.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from modules import seeding
from modules.datagen import (
    CsvSchema,
    DevicePartition,
    FeatureSplitDataset,
    FeatureView,
    feature_view,
    generate_synthetic,
    load_csv,
    partition_dirichlet,
    partition_iid,
    standardize,
)
from modules.errors import ConfigError, StateError
from modules.evaluation import RoundReport, RoundStats, build_round_report
from modules.nn_core import clone_net, deserialize_params, params_checksum, serialize_params
from modules.participants import (
    CloudState,
    ParticipantState,
    build_cloud,
    build_participant,
    cloud_train_round,
    edge_train_round,
)
from modules.run_config import TrainingConfig, validate_for_method
from modules.run_store import RunWriter
from modules.transfer import packet_nbytes, store_apply

logger = logging.getLogger(__name__)


@dataclass
class Environment:
    dataset: FeatureSplitDataset
    partition: DevicePartition
    view: FeatureView


@dataclass
class RunResult:
    config: TrainingConfig
    reports: List[RoundReport]
    participants: List[ParticipantState]
    cloud: Optional[CloudState] = None
    global_params: Optional[np.ndarray] = None
    run_dir: Optional[Path] = None


def build_environment(cfg: TrainingConfig) -> Environment:
    """Dataset, device partition and feature view of a run."""
    data = cfg.data
    if data.source == "synthetic":
        dataset = generate_synthetic(
            num_classes=data.num_classes,
            num_samples=data.num_samples,
            fed_dim=data.fed_dim,
            cen_dim=data.cen_dim,
            class_separation=data.class_separation,
            seed=cfg.seed
        )
    else:
        schema = CsvSchema(
            federated=tuple(data.federated_columns),
            centralized=tuple(data.centralized_columns),
            label=data.label_column
        )
        dataset = load_csv(data.csv_path, schema, standardize_columns=False)

    if data.partition == "iid":
        partition = partition_iid(dataset, cfg.num_devices, seed=cfg.seed, test_ratio=data.test_ratio)
    else:
        partition = partition_dirichlet(
            dataset, cfg.num_devices, alpha=data.dirichlet_alpha, seed=cfg.seed, test_ratio=data.test_ratio
        )
    if data.source == "csv" and data.standardize:
        dataset = standardize(dataset, partition.all_train_ids())
    return Environment(dataset=dataset, partition=partition, view=feature_view(dataset, cfg.feature_setting))


def select_devices(num_devices: int, select_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """ceil(select_ratio * K) devices drawn uniformly without replacement, in id order."""
    # rounding guards products such as 0.6 * 50 = 30.000000000000004
    count = min(num_devices, max(1, math.ceil(round(select_ratio * num_devices, 9))))
    if count == num_devices:
        return np.arange(num_devices)
    return np.sort(rng.choice(num_devices, size=count, replace=False))


def apply_async_mode(cfg: TrainingConfig, round_idx: int, p: ParticipantState) -> Tuple[int, bool]:
    """Effective epochs of a selected device this round and whether it communicates.

    asyn_epoch draws the epochs uniformly from {1, ..., 2 E_d - 1}; asyn_version
    lets device k communicate only on local rounds divisible by its period f_k.
    asyn_both combines the two.
    """
    epochs = cfg.epochs_for(p.device_id)
    if cfg.async_mode in ("asyn_epoch", "asyn_both"):
        epochs = int(p.async_rng.integers(1, 2 * epochs))
    communicates = True
    if cfg.async_mode in ("asyn_version", "asyn_both"):
        communicates = p.model_version % p.comm_period == 0
    logger.debug(f"Round {round_idx}: device {p.device_id} trains {epochs} epochs, communicates={communicates}")
    return epochs, communicates


def _checksums(nets) -> List[str]:
    return [params_checksum(net) for net in nets]


def edge_fingerprint(participants: Sequence[ParticipantState]) -> List[str]:
    sums = []
    for p in participants:
        sums.extend(_checksums(p.nets()))
        if p.store is not None:
            sums.append(p.store.checksum())
    return sums


def cloud_fingerprint(cloud: Optional[CloudState]) -> List[str]:
    if cloud is None:
        return []
    return _checksums(cloud.nets()) + [cloud.stores[k].checksum() for k in sorted(cloud.stores)]


def verify_freeze(before: List[str], after: List[str], phase: str) -> None:
    """Raises StateError if the side that should be frozen changed during ``phase``."""
    if before != after:
        raise StateError(f"frozen parameters or stored knowledge changed during {phase}")


def _train_edges(
        cfg: TrainingConfig,
        participants: Sequence[ParticipantState],
        plan: Dict[int, Tuple[int, bool]],
        round_idx: int
) -> Dict[int, list]:
    selected = sorted(plan)
    if cfg.workers > 1 and len(selected) > 1:
        outputs = Parallel(n_jobs=cfg.workers, backend="threading")(
            delayed(edge_train_round)(participants[k], cfg, round_idx, plan[k][0]) for k in selected
        )
    else:
        outputs = [edge_train_round(participants[k], cfg, round_idx, plan[k][0]) for k in selected]
    return dict(zip(selected, outputs))


def _open_writer(cfg: TrainingConfig, run_dir: Optional[Union[str, Path]]) -> Optional[RunWriter]:
    if run_dir is None:
        return None
    writer = RunWriter(run_dir, dump_payloads=cfg.transfer.dump_payloads)
    writer.write_config(cfg)
    return writer


def _record(writer: Optional[RunWriter], reports: List[RoundReport], report: RoundReport) -> None:
    reports.append(report)
    if writer is not None:
        writer.log_report(report)


def _run_collaborative(cfg: TrainingConfig, env: Environment, writer: Optional[RunWriter]) -> RunResult:
    """Shared loop of ecct, fedgkt and local (local has no cloud and no exchange)."""
    participants = [build_participant(cfg, env.view, env.partition, k) for k in range(cfg.num_devices)]
    cloud = build_cloud(cfg, env.view, env.partition) if cfg.method in ("ecct", "fedgkt") else None
    select_rng = seeding.rng_for(cfg.seed, seeding.SELECT)

    reports: List[RoundReport] = []
    _record(writer, reports, build_round_report(-1, cfg.method, participants, cloud, RoundStats()))

    for r in tqdm(range(cfg.rounds), desc=cfg.method, disable=not cfg.progress):
        selected = select_devices(cfg.num_devices, cfg.select_ratio, select_rng)
        plan = {int(k): apply_async_mode(cfg, r, participants[k]) for k in selected}
        stats = RoundStats(
            selected=set(plan),
            communicated={k for k, (_, comm) in plan.items() if comm},
            epochs={k: e for k, (e, _) in plan.items()}
        )

        downlink = []
        if cloud is not None:
            frozen = edge_fingerprint(participants)
            downlink = cloud_train_round(cloud, cfg, r, targets=sorted(plan))
            verify_freeze(frozen, edge_fingerprint(participants), f"cloud training of round {r}")

        frozen = cloud_fingerprint(cloud)
        uplink = _train_edges(cfg, participants, plan, r)
        verify_freeze(frozen, cloud_fingerprint(cloud), f"edge training of round {r}")

        # exchange at the round boundary
        for k in sorted(plan):
            p = participants[k]
            p.outbox.extend(uplink[k])
            if cloud is None or k not in stats.communicated:
                continue
            for packet in p.outbox:
                store_apply(cloud.stores[k], packet)
                stats.packets_up += 1
                stats.bytes_up += packet_nbytes(packet)
                if writer is not None:
                    writer.log_packet(packet, r)
            p.outbox.clear()
        for k, packet in downlink:
            participants[k].inbox.append(packet)
        for k in sorted(stats.communicated):
            p = participants[k]
            for packet in p.inbox:
                store_apply(p.store, packet)
                stats.packets_down += 1
                stats.bytes_down += packet_nbytes(packet)
                if writer is not None:
                    writer.log_packet(packet, r)
            p.inbox.clear()

        report = build_round_report(r, cfg.method, participants, cloud, stats)
        logger.debug(
            f"Round {r}: edge acc {report.edge_accuracy_mean:.4f}, packets up/down {stats.packets_up}/{stats.packets_down}"
        )
        _record(writer, reports, report)

    if writer is not None and cfg.save_checkpoints:
        for p in participants:
            if p.encoder is not None:
                writer.save_net(f"device_{p.device_id}_encoder", p.encoder)
            writer.save_net(f"device_{p.device_id}_classifier", p.classifier)
        if cloud is not None:
            if cloud.encoder is not None:
                writer.save_net("cloud_encoder", cloud.encoder)
            writer.save_net("cloud_classifier", cloud.classifier)
    return RunResult(config=cfg, reports=reports, participants=participants, cloud=cloud)


def model_vector(p: ParticipantState) -> np.ndarray:
    return np.concatenate([serialize_params(net) for net in p.nets()])


def load_model_vector(p: ParticipantState, vector: np.ndarray) -> None:
    offset = 0
    for net in p.nets():
        deserialize_params(net, vector[offset:offset + net.num_params])
        offset += net.num_params


def global_model_copies(participants: Sequence[ParticipantState], global_params: np.ndarray) -> List[ParticipantState]:
    """Per-device copies holding the global model, for evaluating it on every local test split.

    Optimizer state and local models of the originals are left untouched.
    """
    copies = []
    for p in participants:
        q = replace(p, encoder=None if p.encoder is None else clone_net(p.encoder), classifier=clone_net(p.classifier))
        load_model_vector(q, global_params)
        copies.append(q)
    return copies


def federated_average(vectors: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Sample-size weighted mean of flat parameter vectors (exact copy for one vector)."""
    if len(vectors) == 1:
        return np.array(vectors[0], copy=True)
    total = float(sum(sizes))
    out = np.zeros_like(vectors[0])
    for v, n in zip(vectors, sizes):
        out += (n / total) * v
    return out


def _run_fedavg(cfg: TrainingConfig, env: Environment, writer: Optional[RunWriter]) -> RunResult:
    participants = [build_participant(cfg, env.view, env.partition, k) for k in range(cfg.num_devices)]
    global_params = model_vector(participants[0])
    for p in participants:
        load_model_vector(p, global_params)
    select_rng = seeding.rng_for(cfg.seed, seeding.SELECT)

    reports: List[RoundReport] = []
    initial = build_round_report(-1, cfg.method, global_model_copies(participants, global_params), None, RoundStats())
    _record(writer, reports, initial)

    for r in tqdm(range(cfg.rounds), desc=cfg.method, disable=not cfg.progress):
        selected = select_devices(cfg.num_devices, cfg.select_ratio, select_rng)
        plan = {int(k): apply_async_mode(cfg, r, participants[k]) for k in selected}
        uploaders = sorted(k for k, (_, comm) in plan.items() if comm)
        stats = RoundStats(selected=set(plan), communicated=set(uploaders), epochs={k: e for k, (e, _) in plan.items()})

        for k in uploaders:
            load_model_vector(participants[k], global_params)
        _train_edges(cfg, participants, plan, r)

        if uploaders:
            global_params = federated_average(
                [model_vector(participants[k]) for k in uploaders],
                [len(participants[k].train_ids) for k in uploaders]
            )
            for k in uploaders:
                load_model_vector(participants[k], global_params)
            stats.packets_up = stats.packets_down = len(uploaders)
            stats.bytes_up = stats.bytes_down = len(uploaders) * global_params.nbytes
            if writer is not None:
                writer.log_event({"round": r, "aggregated": uploaders, "num_params": int(global_params.size)})

        # the product of a round is the global model, evaluated on every device's test split
        report = build_round_report(r, cfg.method, global_model_copies(participants, global_params), None, stats)
        _record(writer, reports, report)

    if writer is not None and cfg.save_checkpoints:
        holder = global_model_copies(participants[:1], global_params)[0]
        if holder.encoder is not None:
            writer.save_net("global_encoder", holder.encoder)
        writer.save_net("global_classifier", holder.classifier)
    return RunResult(config=cfg, reports=reports, participants=participants, global_params=global_params)


def run_training(
        cfg: TrainingConfig,
        run_dir: Optional[Union[str, Path]] = None,
        env: Optional[Environment] = None
) -> RunResult:
    """Validates ``cfg``, runs the configured method and writes the run directory if given."""
    validate_for_method(cfg)
    env = env or build_environment(cfg)
    logger.info(
        f"Starting {cfg.method} run: K={cfg.num_devices}, R={cfg.rounds}, setting={cfg.feature_setting}, "
        f"async={cfg.async_mode}, select_ratio={cfg.select_ratio}, seed={cfg.seed}"
    )
    writer = _open_writer(cfg, run_dir)
    try:
        if cfg.method == "fedavg":
            result = _run_fedavg(cfg, env, writer)
        else:
            result = _run_collaborative(cfg, env, writer)
    finally:
        if writer is not None:
            writer.close()
    if run_dir is not None:
        result.run_dir = Path(run_dir)
        logger.info(f"Run artifacts written to {run_dir}")
    final = result.reports[-1]
    logger.info(f"Finished {cfg.method} run: final edge accuracy {final.edge_accuracy_mean:.4f}")
    return result


def _run_method(method: str, cfg: TrainingConfig, run_dir, env) -> RunResult:
    if cfg.method != method:
        raise ConfigError(f"run_{method} called with method '{cfg.method}'")
    return run_training(cfg, run_dir, env)


def run_ecct(cfg: TrainingConfig, run_dir=None, env: Optional[Environment] = None) -> RunResult:
    return _run_method("ecct", cfg, run_dir, env)


def run_fedavg(cfg: TrainingConfig, run_dir=None, env: Optional[Environment] = None) -> RunResult:
    return _run_method("fedavg", cfg, run_dir, env)


def run_fedgkt(cfg: TrainingConfig, run_dir=None, env: Optional[Environment] = None) -> RunResult:
    return _run_method("fedgkt", cfg, run_dir, env)


def run_local(cfg: TrainingConfig, run_dir=None, env: Optional[Environment] = None) -> RunResult:
    return _run_method("local", cfg, run_dir, env)
