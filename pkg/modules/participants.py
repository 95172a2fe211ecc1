"""Module for the edge devices and the cloud: their models, knowledge stores and training rounds.

A round of edge training only reads the device's own store (cloud knowledge
received earlier) and a round of cloud training only reads the cloud's
stores; the counterpart embeddings enter each classifier as constants.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from modules import seeding
from modules.datagen import DevicePartition, FeatureView
from modules.errors import ShapeError
from modules.losses import device_loss, server_loss, stage_two
from modules.nn_core import DenseNet, Optimizer, apply_update, backward, build_dense_net, forward
from modules.run_config import TrainingConfig
from modules.transfer import (
    CLOUD_ID,
    UNLABELED,
    Direction,
    KnowledgeBuffer,
    KnowledgePacket,
    KnowledgeStore,
    buffer_push,
    privatize,
    produce_packet,
)

logger = logging.getLogger(__name__)

FUSED_METHODS = ("ecct", "local")
EXCHANGE_METHODS = ("ecct", "fedgkt")


def fuse(
        h_d,
        h_s,
        d_present: Optional[np.ndarray] = None,
        s_present: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenates ``[h_d, h_s]`` row-wise, zero-filling absent rows.

    Args:
        h_d: Device embeddings [B x d_e] (or one vector).
        h_s: Cloud embeddings [B x d_e] (or one vector).
        d_present: Rows where h_d is known (all when None).
        s_present: Rows where h_s is known (all when None).

    Returns:
        The fused matrix [B x 2 d_e] and the mask of rows that were zero-filled.
    """
    d = np.asarray(h_d, dtype=np.float64)
    s = np.asarray(h_s, dtype=np.float64)
    squeeze = d.ndim == 1
    d, s = np.atleast_2d(d), np.atleast_2d(s)
    if d.shape != s.shape:
        raise ShapeError(f"cannot fuse embeddings of shapes {d.shape} and {s.shape}")
    d_ok = np.ones(d.shape[0], dtype=bool) if d_present is None else np.asarray(d_present, dtype=bool)
    s_ok = np.ones(s.shape[0], dtype=bool) if s_present is None else np.asarray(s_present, dtype=bool)
    fused = np.hstack([np.where(d_ok[:, None], d, 0.0), np.where(s_ok[:, None], s, 0.0)])
    missing = ~(d_ok & s_ok)
    return (fused[0], missing[0]) if squeeze else (fused, missing)


def iterate_minibatches(ids, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass over ``ids`` in batches of ``batch_size`` (last one may be short)."""
    ids = np.asarray(ids)
    order = rng.permutation(len(ids))
    for start in range(0, len(ids), batch_size):
        yield ids[order[start:start + batch_size]]


@dataclass
class ParticipantState:
    """One edge device: encoder, classifier, local data and its side of the exchange."""

    device_id: int
    encoder: Optional[DenseNet]
    classifier: DenseNet
    encoder_opt: Optional[Optimizer]
    classifier_opt: Optimizer
    train_ids: np.ndarray
    test_ids: np.ndarray
    view: FeatureView
    embedding_dim: int
    fused: bool
    store: Optional[KnowledgeStore]
    buffer: Optional[KnowledgeBuffer]
    rng: np.random.Generator
    async_rng: np.random.Generator
    privacy_rng: np.random.Generator
    comm_period: int = 1
    model_version: int = 0
    outbox: List[KnowledgePacket] = field(default_factory=list)
    inbox: List[KnowledgePacket] = field(default_factory=list)
    last_loss: Optional[float] = None
    teacher_missing: bool = False

    @property
    def producer_id(self) -> int:
        return self.device_id

    @property
    def all_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train_ids, self.test_ids]))

    def nets(self) -> List[DenseNet]:
        return [n for n in (self.encoder, self.classifier) if n is not None]

    def embed(self, sample_ids) -> np.ndarray:
        ids = np.asarray(sample_ids, dtype=np.int64)
        if self.encoder is None:
            return np.zeros((len(ids), self.embedding_dim))
        return forward(self.encoder, self.view.device_features(ids))

    def classifier_input(self, h_d: np.ndarray, sample_ids) -> Tuple[np.ndarray, np.ndarray]:
        """Device-side classifier input and the rows whose cloud embedding was zero-filled."""
        if not self.fused:
            return h_d, np.zeros(h_d.shape[0], dtype=bool)
        if self.store is None:
            return fuse(h_d, np.zeros_like(h_d), s_present=np.zeros(h_d.shape[0], dtype=bool))
        h_s, present = self.store.lookup_embeddings(sample_ids)
        return fuse(h_d, h_s, s_present=present)

    def predict_logits(self, sample_ids) -> np.ndarray:
        ids = np.asarray(sample_ids, dtype=np.int64)
        inputs, _ = self.classifier_input(self.embed(ids), ids)
        return forward(self.classifier, inputs)


@dataclass
class CloudState:
    """The cloud model with one edge-knowledge store and one downlink buffer per device."""

    encoder: Optional[DenseNet]
    classifier: DenseNet
    encoder_opt: Optional[Optimizer]
    classifier_opt: Optimizer
    view: FeatureView
    embedding_dim: int
    fused: bool
    stores: Dict[int, KnowledgeStore]
    buffers: Dict[int, KnowledgeBuffer]
    rng: np.random.Generator
    model_version: int = 0
    last_loss: Optional[float] = None
    skipped: bool = False

    @property
    def producer_id(self) -> int:
        return CLOUD_ID

    @property
    def join_errors(self) -> int:
        return sum(store.rejected for store in self.stores.values())

    def nets(self) -> List[DenseNet]:
        return [n for n in (self.encoder, self.classifier) if n is not None]

    def embed(self, sample_ids) -> np.ndarray:
        ids = np.asarray(sample_ids, dtype=np.int64)
        if self.encoder is None:
            return np.zeros((len(ids), self.embedding_dim))
        return forward(self.encoder, self.view.cloud_features(ids))

    def predict_logits(self, device_id: int, sample_ids) -> Tuple[np.ndarray, np.ndarray]:
        """Cloud logits for samples of ``device_id`` and the rows with a zero-filled device embedding."""
        ids = np.asarray(sample_ids, dtype=np.int64)
        h_d, present = self.stores[device_id].lookup_embeddings(ids)
        if not self.fused:
            return forward(self.classifier, h_d), ~present
        inputs, missing = fuse(h_d, self.embed(ids), d_present=present)
        return forward(self.classifier, inputs), missing


@dataclass
class _CloudSource:
    """Adapts the cloud to ``KnowledgeSource`` for the samples of one device."""

    cloud: CloudState
    device_id: int

    @property
    def producer_id(self) -> int:
        return CLOUD_ID

    @property
    def model_version(self) -> int:
        return self.cloud.model_version

    def embed(self, sample_ids) -> Optional[np.ndarray]:
        return self.cloud.embed(sample_ids) if self.cloud.fused else None

    def predict_logits(self, sample_ids) -> np.ndarray:
        return self.cloud.predict_logits(self.device_id, sample_ids)[0]


def edge_widths(cfg: TrainingConfig, device_id: int) -> List[int]:
    """Hidden widths of a device encoder; per-device draws in hetero mode."""
    arch = cfg.architecture
    if not arch.hetero:
        return list(arch.edge_encoder_widths)
    rng = seeding.rng_for(cfg.seed, seeding.ARCH, device_id)
    return [int(rng.choice(arch.hetero_width_choices)) for _ in arch.edge_encoder_widths]


def build_participant(
        cfg: TrainingConfig,
        view: FeatureView,
        partition: DevicePartition,
        device_id: int
) -> ParticipantState:
    d_e = cfg.architecture.embedding_dim
    init = seeding.rng_for(cfg.seed, seeding.INIT, device_id)
    fused = cfg.method in FUSED_METHODS
    encoder = build_dense_net(view.device_dim, edge_widths(cfg, device_id), d_e, init) if view.device_dim > 0 else None
    classifier = build_dense_net(2 * d_e if fused else d_e, cfg.architecture.edge_classifier_widths, view.num_classes, init)

    train_ids, test_ids = partition.train[device_id], partition.test[device_id]
    exchanges = cfg.method in EXCHANGE_METHODS
    store = buffer = None
    if exchanges:
        universe = np.concatenate([train_ids, test_ids])
        store = KnowledgeStore(universe, d_e, view.num_classes, Direction.CLOUD_TO_EDGE)
        buffer = KnowledgeBuffer(cfg.transfer.buffer_capacity)

    async_rng = seeding.rng_for(cfg.seed, seeding.ASYNC, device_id)
    comm_period = 1
    if cfg.async_mode in ("asyn_version", "asyn_both"):
        comm_period = int(async_rng.choice(cfg.comm_periods))

    return ParticipantState(
        device_id=device_id,
        encoder=encoder,
        classifier=classifier,
        encoder_opt=cfg.optimizer.build() if encoder is not None else None,
        classifier_opt=cfg.optimizer.build(),
        train_ids=train_ids,
        test_ids=test_ids,
        view=view,
        embedding_dim=d_e,
        fused=fused,
        store=store,
        buffer=buffer,
        rng=seeding.rng_for(cfg.seed, seeding.TRAIN, device_id),
        async_rng=async_rng,
        privacy_rng=seeding.rng_for(cfg.seed, seeding.PRIVACY, device_id),
        comm_period=comm_period
    )


def build_cloud(cfg: TrainingConfig, view: FeatureView, partition: DevicePartition) -> CloudState:
    d_e = cfg.architecture.embedding_dim
    init = seeding.rng_for(cfg.seed, seeding.INIT, seeding.CLOUD_INDEX)
    fused = cfg.method == "ecct"
    encoder = None
    if fused and view.cloud_dim > 0:
        encoder = build_dense_net(view.cloud_dim, cfg.architecture.cloud_encoder_widths, d_e, init)
    classifier = build_dense_net(2 * d_e if fused else d_e, cfg.architecture.cloud_classifier_widths, view.num_classes, init)
    assignments = partition.assignments
    return CloudState(
        encoder=encoder,
        classifier=classifier,
        encoder_opt=cfg.optimizer.build() if encoder is not None else None,
        classifier_opt=cfg.optimizer.build(),
        view=view,
        embedding_dim=d_e,
        fused=fused,
        stores={k: KnowledgeStore(ids, d_e, view.num_classes, Direction.EDGE_TO_CLOUD) for k, ids in assignments.items()},
        buffers={k: KnowledgeBuffer(cfg.transfer.effective_downlink_capacity) for k in assignments},
        rng=seeding.rng_for(cfg.seed, seeding.TRAIN, seeding.CLOUD_INDEX)
    )


def _edge_fragment(p: ParticipantState, cfg: TrainingConfig, round_idx: int) -> KnowledgePacket:
    ids = p.all_ids if cfg.transfer.share_test_embeddings else p.train_ids
    labels = np.where(np.isin(ids, p.train_ids), p.view.labels[ids], UNLABELED)
    packet = produce_packet(p, ids, round_idx, stage_two(cfg.loss, round_idx), Direction.EDGE_TO_CLOUD, labels)
    if cfg.privacy.enabled:
        noisy = privatize(packet.embeddings, cfg.privacy.effective_clip_norm, cfg.privacy.noise_sigma, p.privacy_rng)
        packet = replace(packet, embeddings=noisy)
    return packet


def edge_train_round(
        p: ParticipantState,
        cfg: TrainingConfig,
        round_idx: int,
        epochs: Optional[int] = None
) -> List[KnowledgePacket]:
    """Trains the device for ``epochs`` passes over its train split.

    The classifier gradient w.r.t. the fused input is cut at the device
    embedding columns; the stored cloud embedding is a constant. After
    training the model version is bumped and, for exchanging methods, a
    fragment over the local samples is pushed to the uplink buffer.

    Returns:
        The packets flushed by the uplink buffer (possibly none).
    """
    epochs = cfg.epochs_for(p.device_id) if epochs is None else epochs
    labels = p.view.labels
    d_e = p.embedding_dim
    losses, missing = [], False
    for _ in range(epochs):
        for batch_ids in iterate_minibatches(p.train_ids, cfg.batch_size, p.rng):
            h_d = p.embed(batch_ids)
            inputs, _ = p.classifier_input(h_d, batch_ids)
            logits = forward(p.classifier, inputs)
            teacher, present = None, None
            if p.store is not None:
                teacher, present = p.store.lookup_logits(batch_ids)
            result = device_loss(logits, teacher, labels[batch_ids], cfg.loss, round_idx, teacher_present=present)
            missing = missing or result.teacher_missing

            grads, input_grad = backward(p.classifier, result.grad)
            apply_update(p.classifier, grads, p.classifier_opt)
            if p.encoder is not None:
                enc_grads, _ = backward(p.encoder, input_grad[:, :d_e])
                apply_update(p.encoder, enc_grads, p.encoder_opt)
            losses.append(result.value)

    p.model_version += 1
    p.last_loss = float(np.mean(losses)) if losses else None
    p.teacher_missing = missing
    if p.buffer is None:
        return []
    flushed = buffer_push(p.buffer, _edge_fragment(p, cfg, round_idx))
    return [flushed] if flushed is not None else []


def _labeled_rows(cloud: CloudState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, owners, labels = [], [], []
    for k in sorted(cloud.stores):
        k_ids, k_labels = cloud.stores[k].labeled_ids()
        ids.append(k_ids)
        labels.append(k_labels)
        owners.append(np.full(len(k_ids), k, dtype=np.int64))
    return np.concatenate(ids), np.concatenate(owners), np.concatenate(labels)


def cloud_train_round(
        cloud: CloudState,
        cfg: TrainingConfig,
        round_idx: int,
        targets: Sequence[int]
) -> List[Tuple[int, KnowledgePacket]]:
    """Trains the cloud on every labeled row it holds, then prepares knowledge for ``targets``.

    Minibatches are drawn from the union of the per-device stores; inside a
    batch the rows are grouped by owning device so the distillation term is
    a per-device sum. Without any labeled knowledge the round is skipped.

    Returns:
        (device id, packet) pairs flushed by the downlink buffers.
    """
    all_ids, owners, all_labels = _labeled_rows(cloud)
    if len(all_ids) == 0:
        logger.info(f"Round {round_idx}: cloud has no edge knowledge yet, skipping cloud training")
        cloud.skipped = True
        cloud.last_loss = None
        return []

    cloud.skipped = False
    d_e = cloud.embedding_dim
    losses = []
    for _ in range(cfg.cloud_epochs):
        for rows in iterate_minibatches(np.arange(len(all_ids)), cfg.batch_size, cloud.rng):
            rows = rows[np.argsort(owners[rows], kind="stable")]
            ids, batch_owners, y = all_ids[rows], owners[rows], all_labels[rows]
            devices, starts = np.unique(batch_owners, return_index=True)
            groups = np.split(np.arange(len(rows)), starts[1:])

            h_d = np.vstack([cloud.stores[int(k)].lookup_embeddings(ids[g])[0] for k, g in zip(devices, groups)])
            if cloud.fused:
                inputs, _ = fuse(h_d, cloud.embed(ids))
            else:
                inputs = h_d
            logits = forward(cloud.classifier, inputs)

            teachers, present = [], []
            for k, g in zip(devices, groups):
                z, has = cloud.stores[int(k)].lookup_logits(ids[g])
                teachers.append(z if has.any() else None)
                present.append(has)
            result, _ = server_loss(
                [logits[g] for g in groups], teachers, [y[g] for g in groups], cfg.loss, round_idx, present,
                num_devices=cfg.num_devices
            )

            grads, input_grad = backward(cloud.classifier, result.grad)
            apply_update(cloud.classifier, grads, cloud.classifier_opt)
            if cloud.encoder is not None:
                enc_grads, _ = backward(cloud.encoder, input_grad[:, d_e:])
                apply_update(cloud.encoder, enc_grads, cloud.encoder_opt)
            losses.append(result.value)

    cloud.model_version += 1
    cloud.last_loss = float(np.mean(losses))
    logger.debug(f"Round {round_idx}: cloud loss {cloud.last_loss:.6f} over {len(all_ids)} rows")

    in_stage_two = stage_two(cfg.loss, round_idx)
    if not cloud.fused and not in_stage_two:
        # logit-only downlink has nothing to send before the switch round
        return []
    flushed = []
    for k in sorted(targets):
        store = cloud.stores[k]
        ids = store.universe[store.has_embedding]
        if len(ids) == 0:
            continue
        fragment = produce_packet(_CloudSource(cloud, k), ids, round_idx, in_stage_two, Direction.CLOUD_TO_EDGE)
        packet = buffer_push(cloud.buffers[k], fragment)
        if packet is not None:
            flushed.append((k, packet))
    return flushed
