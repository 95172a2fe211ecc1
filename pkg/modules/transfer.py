"""Module for the edge-cloud knowledge exchange: packets, buffers, stores and privatization."""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, BinaryIO, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import orjson

from modules.errors import InputError, ShapeError

logger = logging.getLogger(__name__)

CLOUD_ID = -1
UNLABELED = -1


class Direction(str, Enum):
    EDGE_TO_CLOUD = "edge_to_cloud"
    CLOUD_TO_EDGE = "cloud_to_edge"


def _frozen(a, dtype) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KnowledgePacket:
    """Immutable unit of exchanged knowledge, one row per sample.

    ``versions`` holds the producer model version of every row; a flushed
    packet may mix rows from several versions. ``logit_mask`` marks the rows
    that carry logits when only some do (None means all rows, when logits
    are present).
    """

    producer_id: int
    direction: Direction
    sample_ids: np.ndarray
    versions: np.ndarray
    created_round: int
    embeddings: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    logit_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "sample_ids", _frozen(self.sample_ids, np.int64))
        object.__setattr__(self, "versions", _frozen(self.versions, np.int64))
        object.__setattr__(self, "embeddings", _frozen(self.embeddings, np.float64))
        object.__setattr__(self, "logits", _frozen(self.logits, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "logit_mask", _frozen(self.logit_mask, bool))

        n = self.sample_ids.shape[0]
        if self.sample_ids.ndim != 1 or self.versions.shape != (n,):
            raise ShapeError("sample_ids and versions must be vectors of equal length")
        if self.embeddings is not None and (self.embeddings.ndim != 2 or self.embeddings.shape[0] != n):
            raise ShapeError(f"embeddings of shape {self.embeddings.shape} do not match {n} samples")
        if self.logits is not None and (self.logits.ndim != 2 or self.logits.shape[0] != n):
            raise ShapeError(f"logits of shape {self.logits.shape} do not match {n} samples")
        if self.labels is not None and self.labels.shape != (n,):
            raise ShapeError(f"labels of shape {self.labels.shape} do not match {n} samples")
        if self.logit_mask is not None and (self.logits is None or self.logit_mask.shape != (n,)):
            raise ShapeError("logit_mask needs logits and one entry per sample")
        if self.direction is Direction.EDGE_TO_CLOUD and (self.embeddings is None or self.labels is None):
            raise ShapeError("edge_to_cloud packets carry embeddings and labels")
        if self.embeddings is None and self.logits is None:
            raise ShapeError("a packet carries embeddings, logits or both")

    @property
    def num_rows(self) -> int:
        return int(self.sample_ids.shape[0])

    @property
    def model_version(self) -> int:
        return int(self.versions.max()) if self.num_rows else 0

    @property
    def has_logits(self) -> bool:
        return self.logits is not None

    def logit_rows(self) -> np.ndarray:
        if self.logits is None:
            return np.zeros(self.num_rows, dtype=bool)
        if self.logit_mask is None:
            return np.ones(self.num_rows, dtype=bool)
        return self.logit_mask


class KnowledgeSource(Protocol):
    """Anything that can infer embeddings and logits for its own samples."""

    producer_id: int
    model_version: int

    def embed(self, sample_ids: np.ndarray) -> Optional[np.ndarray]:
        ...

    def predict_logits(self, sample_ids: np.ndarray) -> np.ndarray:
        ...


def produce_packet(
        model: KnowledgeSource,
        sample_ids: Sequence[int],
        round_idx: int,
        stage_two: bool,
        direction: Direction,
        labels: Optional[Sequence[int]] = None
) -> KnowledgePacket:
    """Infers embeddings (and logits in stage two) for ``sample_ids``.

    Args:
        model: Producer of the knowledge.
        sample_ids: Samples in the producer's view.
        round_idx: Round the packet is created in.
        stage_two: Whether logits are part of the exchange yet.
        direction: Edge-to-cloud or cloud-to-edge.
        labels: Per-sample labels (edge-to-cloud; UNLABELED for test samples).

    Returns:
        A single-version KnowledgePacket.
    """
    ids = np.asarray(sample_ids, dtype=np.int64)
    if ids.size == 0:
        raise InputError("cannot produce a packet for an empty sample list")
    return KnowledgePacket(
        producer_id=model.producer_id,
        direction=direction,
        sample_ids=ids,
        versions=np.full(ids.shape[0], model.model_version, dtype=np.int64),
        created_round=round_idx,
        embeddings=model.embed(ids),
        logits=model.predict_logits(ids) if stage_two else None,
        labels=labels
    )


@dataclass
class KnowledgeBuffer:
    """Accumulates packet fragments until ``capacity`` sample rows are pending."""

    capacity: int
    pending: List[KnowledgePacket] = field(default_factory=list)
    pending_rows: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("buffer capacity must be positive")


def _merge(fragments: List[KnowledgePacket]) -> KnowledgePacket:
    first = fragments[0]
    if any(f.producer_id != first.producer_id or f.direction != first.direction for f in fragments):
        raise InputError("a buffer only holds fragments of one producer and direction")
    if len({f.embeddings is None for f in fragments}) > 1 or len({f.labels is None for f in fragments}) > 1:
        raise ShapeError("buffered fragments disagree on which fields they carry")

    ids = np.concatenate([f.sample_ids for f in fragments])
    # latest-wins: last occurrence of every sample id, ordered by sample id
    _, first_in_reversed = np.unique(ids[::-1], return_index=True)
    keep = len(ids) - 1 - first_in_reversed

    def stacked(name: str) -> Optional[np.ndarray]:
        if getattr(first, name) is None:
            return None
        return np.concatenate([getattr(f, name) for f in fragments])[keep]

    logits, mask = None, None
    carriers = [f for f in fragments if f.logits is not None]
    if carriers:
        width = carriers[0].logits.shape[1]
        logits = np.concatenate([
            f.logits if f.logits is not None else np.zeros((f.num_rows, width)) for f in fragments
        ])[keep]
        mask = np.concatenate([f.logit_rows() for f in fragments])[keep]
        if mask.all():
            mask = None
        elif not mask.any():
            logits, mask = None, None

    embeddings = stacked("embeddings")
    if embeddings is None and logits is None:
        raise ShapeError("flushed rows carry neither embeddings nor logits")
    return KnowledgePacket(
        producer_id=first.producer_id,
        direction=first.direction,
        sample_ids=ids[keep],
        versions=np.concatenate([f.versions for f in fragments])[keep],
        created_round=max(f.created_round for f in fragments),
        embeddings=embeddings,
        logits=logits,
        labels=stacked("labels"),
        logit_mask=mask
    )


def buffer_push(buf: KnowledgeBuffer, fragment: KnowledgePacket) -> Optional[KnowledgePacket]:
    """Adds a fragment; returns the merged packet once ``capacity`` rows are pending."""
    buf.pending.append(fragment)
    buf.pending_rows += fragment.num_rows
    if buf.pending_rows < buf.capacity:
        return None
    packet = _merge(buf.pending)
    logger.debug(
        f"Flushed buffer of producer {packet.producer_id}: {buf.pending_rows} pending rows -> {packet.num_rows} samples"
    )
    buf.pending = []
    buf.pending_rows = 0
    return packet


class KnowledgeStore:
    """Latest counterpart knowledge per sample, over a fixed universe of sample ids.

    Entries are only replaced by rows whose version is at least the stored
    one; ties go to the later arrival.
    """

    def __init__(self, universe_ids: Sequence[int], embedding_dim: int, num_classes: int, direction: Direction):
        self.universe = np.unique(np.asarray(universe_ids, dtype=np.int64))
        self.embedding_dim = int(embedding_dim)
        self.num_classes = int(num_classes)
        self.direction = Direction(direction)
        n = self.universe.shape[0]
        self.embeddings = np.zeros((n, self.embedding_dim))
        self.logits = np.zeros((n, self.num_classes))
        self.labels = np.full(n, UNLABELED, dtype=np.int64)
        self.versions = np.full(n, -1, dtype=np.int64)
        self.has_embedding = np.zeros(n, dtype=bool)
        self.has_logits = np.zeros(n, dtype=bool)
        self.rejected = 0

    def __len__(self) -> int:
        return int(np.count_nonzero(self.versions >= 0))

    def _locate(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.universe, ids)
        clipped = np.minimum(pos, max(len(self.universe) - 1, 0))
        known = (pos < len(self.universe)) & (self.universe[clipped] == ids) if len(self.universe) else np.zeros(ids.shape, bool)
        return clipped, known

    def lookup_embeddings(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        """Stored embeddings for ``ids`` (zero rows where absent) and the presence mask."""
        pos, known = self._locate(ids)
        present = known & self.has_embedding[pos]
        out = np.where(present[:, None], self.embeddings[pos], 0.0)
        return out, present

    def lookup_logits(self, ids) -> Tuple[np.ndarray, np.ndarray]:
        pos, known = self._locate(ids)
        present = known & self.has_logits[pos]
        out = np.where(present[:, None], self.logits[pos], 0.0)
        return out, present

    def present_ids(self) -> np.ndarray:
        return self.universe[self.versions >= 0]

    def labeled_ids(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ids with an embedding and a label, with their labels (sorted by id)."""
        rows = self.has_embedding & (self.labels >= 0)
        return self.universe[rows], self.labels[rows]

    def stored_versions(self) -> np.ndarray:
        return self.versions[self.versions >= 0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.embeddings, self.logits, self.versions, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def store_apply(store: KnowledgeStore, packet: KnowledgePacket) -> int:
    """Applies a packet with per-sample latest-wins semantics.

    Rows for unknown sample ids are skipped and counted in ``store.rejected``.

    Returns:
        Number of rows that inserted an entry or changed a stored one.
    """
    if packet.direction != store.direction:
        raise InputError(f"{packet.direction.value} packet applied to a {store.direction.value} store")
    if packet.embeddings is not None and packet.embeddings.shape[1] != store.embedding_dim:
        raise ShapeError(f"embedding dim {packet.embeddings.shape[1]} != store dim {store.embedding_dim}")
    if packet.logits is not None and packet.logits.shape[1] != store.num_classes:
        raise ShapeError(f"logits have {packet.logits.shape[1]} classes, store expects {store.num_classes}")
    if packet.num_rows == 0:
        return 0

    # within a packet the later row wins
    ids = packet.sample_ids
    _, first_in_reversed = np.unique(ids[::-1], return_index=True)
    rows = np.sort(len(ids) - 1 - first_in_reversed)

    pos, known = store._locate(ids[rows])
    if not known.all():
        store.rejected += int(np.count_nonzero(~known))
        logger.warning(f"Skipped {np.count_nonzero(~known)} rows with sample ids unknown to this store")
    rows, pos = rows[known], pos[known]

    versions = packet.versions[rows]
    current = store.versions[pos]
    accept = versions >= current
    changed = versions > current
    tie = accept & ~changed
    logit_rows = packet.logit_rows()[rows]
    if np.any(tie):
        differs = np.zeros(len(rows), dtype=bool)
        if packet.embeddings is not None:
            differs |= np.any(packet.embeddings[rows] != store.embeddings[pos], axis=1) | ~store.has_embedding[pos]
        if packet.logits is not None:
            differs |= logit_rows & (np.any(packet.logits[rows] != store.logits[pos], axis=1) | ~store.has_logits[pos])
        if packet.labels is not None:
            differs |= packet.labels[rows] != store.labels[pos]
        changed |= tie & differs

    rows, pos = rows[accept], pos[accept]
    store.versions[pos] = packet.versions[rows]
    if packet.embeddings is not None:
        store.embeddings[pos] = packet.embeddings[rows]
        store.has_embedding[pos] = True
    if packet.logits is not None:
        with_logits = logit_rows[accept]
        store.logits[pos[with_logits]] = packet.logits[rows[with_logits]]
        store.has_logits[pos[with_logits]] = True
    if packet.labels is not None:
        store.labels[pos] = packet.labels[rows]
    return int(np.count_nonzero(changed))


def privatize(
        embeddings,
        clip_norm: float = float("inf"),
        noise_sigma: float = 0.0,
        rng: Union[np.random.Generator, int, None] = None
) -> np.ndarray:
    """Clips every row to L2 norm <= ``clip_norm`` and adds N(0, noise_sigma^2) noise."""
    x = np.array(embeddings, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("embeddings contain non-finite values")
    if clip_norm <= 0 or noise_sigma < 0:
        raise InputError("clip_norm must be positive and noise_sigma non-negative")
    if np.isfinite(clip_norm):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x * np.minimum(1.0, clip_norm / np.maximum(norms, np.finfo(np.float64).tiny))
    if noise_sigma > 0:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        x = x + gen.normal(0.0, noise_sigma, size=x.shape)
    return x


def packet_nbytes(packet: KnowledgePacket) -> int:
    total = packet.sample_ids.nbytes + packet.versions.nbytes
    for a in (packet.embeddings, packet.logits, packet.labels):
        if a is not None:
            total += a.nbytes
    return int(total)


def payload_checksum(packet: KnowledgePacket) -> str:
    h = hashlib.sha256()
    for a in (packet.sample_ids, packet.versions, packet.embeddings, packet.logits, packet.labels, packet.logit_mask):
        if a is not None:
            h.update(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()[:16]


def packet_record(packet: KnowledgePacket, delivered_round: int) -> Dict[str, Any]:
    """Metadata line for the event log."""
    return {
        "round": delivered_round,
        "producer": packet.producer_id,
        "direction": packet.direction.value,
        "rows": packet.num_rows,
        "model_version": packet.model_version,
        "min_version": int(packet.versions.min()) if packet.num_rows else 0,
        "created_round": packet.created_round,
        "embedding_shape": list(packet.embeddings.shape) if packet.embeddings is not None else None,
        "logits_shape": list(packet.logits.shape) if packet.logits is not None else None,
        "logit_rows": int(packet.logit_rows().sum()),
        "bytes": packet_nbytes(packet),
        "checksum": payload_checksum(packet)
    }


def write_packet_payload(packet: KnowledgePacket, fh: BinaryIO, delivered_round: int) -> None:
    """Appends a length-prefixed JSON header and the ``<f8`` payload to a sidecar file."""
    header = dict(
        packet_record(packet, delivered_round),
        sample_ids=packet.sample_ids.tolist(),
        versions=packet.versions.tolist(),
        labels=packet.labels.tolist() if packet.labels is not None else None
    )
    header_bytes = orjson.dumps(header, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    fh.write(struct.pack("<I", len(header_bytes)))
    fh.write(header_bytes)
    for a in (packet.embeddings, packet.logits):
        if a is not None:
            fh.write(a.astype("<f8").tobytes())
