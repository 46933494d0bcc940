"""Structural contrastive loss over high-confidence voxel anchors.

Each anchor is pulled toward its own class center and pushed from the other
class centers, the vessel center, and historical negatives held in a
per-class memory bank.  Similarities are cosine, scaled by a temperature.
"""
import logging
from dataclasses import dataclass
from decimal import Decimal
import math

import numpy as np

from .autograd import Tensor

log = logging.getLogger(__name__)

DENOMINATOR_MODES = ("paper_literal", "with_positive")
STRATEGIES = ("fifo", "cats")


@dataclass(frozen=True)
class SclConfig:
    """``denominator_mode='paper_literal'`` sums only the negatives in the
    softmax denominator (the loss can then be negative); ``'with_positive'``
    adds the positive term, InfoNCE style."""

    temperature: float = 0.1
    percentile: float = 95.0
    capacity: int = 16
    strategy: str = "cats"
    denominator_mode: str = "paper_literal"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must lie in (0, 100)")
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")


def nearest_rank_percentile(values, q):
    """Nearest-rank q-th percentile: the ceil(q/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("percentile of an empty set")
    rank = math.ceil(Decimal(str(q)) * values.size / 100)
    return float(values[max(rank, 1) - 1])


@dataclass
class AnchorSet:
    """Anchors per class: voxel indices, their feature rows and confidences.

    ``features`` is the (possibly taped) feature matrix; voxel ``i`` reads
    row ``rows[i]`` of it.
    """

    features: Tensor
    rows: np.ndarray
    voxels: dict       # class -> voxel indices
    confidence: dict   # class -> confidences
    threshold: float

    def classes(self):
        return sorted(c for c, v in self.voxels.items() if len(v))

    def count(self):
        return sum(len(v) for v in self.voxels.values())

    def vectors(self, c):
        """Detached raw anchor vectors of class ``c``."""
        return self.features.data[self.rows[self.voxels[c]]]

    def unit_vectors(self, c):
        v = self.vectors(c)
        return v / np.linalg.norm(v, axis=1, keepdims=True)


def _feature_rows(features, n_voxels, rows):
    if rows is None:
        if features.shape[0] != n_voxels:
            raise ValueError(f"{features.shape[0]} feature rows for {n_voxels} voxels")
        return np.arange(n_voxels)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape != (n_voxels,):
        raise ValueError(f"rows must map each of the {n_voxels} voxels to a feature row")
    return rows


def select_anchors(features, conf, labels, cfg, rows=None):
    """Voxels whose confidence strictly exceeds the global percentile threshold.

    Only voxels with label > 0 are considered.  ``features`` is V x d, or a
    smaller matrix indexed through ``rows``.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    conf = np.asarray(conf, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if conf.shape != labels.shape:
        raise ValueError(f"conf has {conf.size} voxels, labels has {labels.size}")
    rows = _feature_rows(features, labels.size, rows)
    considered = np.flatnonzero(labels > 0)
    if considered.size == 0:
        raise ValueError("select_anchors: no foreground voxels to choose from")
    threshold = nearest_rank_percentile(conf[considered], cfg.percentile)
    picked = considered[conf[considered] > threshold]
    voxels, confidence = {}, {}
    for c in np.unique(labels[considered]):
        sel = picked[labels[picked] == c]
        voxels[int(c)] = sel
        confidence[int(c)] = conf[sel]
    return AnchorSet(features, rows, voxels, confidence, threshold)


def class_centers(tape, features, labels, vessel_mask=None, rows=None):
    """Mean feature per foreground class, plus the mean over vessel voxels.

    Returns ``(centers, vessel_center)`` with ``centers[c]`` a 1 x d tensor.
    ``vessel_center`` is None when no vessel mask is given or it is empty.
    """
    labels = np.asarray(labels).ravel()
    rows = _feature_rows(features, labels.size, rows)
    n_rows = features.shape[0]
    groups = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels) if c > 0}
    if vessel_mask is not None:
        vessel_idx = np.flatnonzero(np.asarray(vessel_mask).ravel())
        if vessel_idx.size == 0:
            log.info("vessel mask is empty; vessel center left out of the negatives")
    else:
        vessel_idx = np.empty(0, dtype=np.int64)
    keys = list(groups)
    sets = [groups[c] for c in keys]
    if vessel_idx.size:
        sets.append(vessel_idx)
    # each center is a weighted row average, one matmul for all of them
    avg = np.zeros((len(sets), n_rows))
    for i, idx in enumerate(sets):
        avg[i] = np.bincount(rows[idx], minlength=n_rows) / idx.size
    stacked = tape.matmul(tape.constant(avg), features)
    out = {c: tape.take_rows(stacked, [i]) for i, c in enumerate(keys)}
    vessel = tape.take_rows(stacked, [len(keys)]) if vessel_idx.size else None
    return out, vessel


class MemoryBank:
    """Bounded per-class store of detached feature vectors.

    ``fifo`` evicts the oldest entry.  ``cats`` keeps the most confident
    entries: a full class replaces its least confident entry (the older one
    on ties) only when the newcomer is strictly more confident.
    """

    def __init__(self, capacity=16, strategy="cats"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        self.capacity = int(capacity)
        self.strategy = strategy
        self.entries = {}
        self.counter = 0
        self.dim = None

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def insert(self, c, vector, confidence):
        vector = np.array(vector, dtype=np.float64).ravel()
        if self.dim is None:
            self.dim = vector.size
        elif vector.size != self.dim:
            raise ValueError(f"memory entries have dim {self.dim}, got a vector of dim {vector.size}")
        if not np.all(np.isfinite(vector)) or not math.isfinite(confidence):
            raise ValueError("memory entries must be finite")
        slot = self.entries.setdefault(int(c), [])
        item = (vector, float(confidence), self.counter)
        self.counter += 1
        if self.strategy == "fifo":
            slot.append(item)
            if len(slot) > self.capacity:
                slot.pop(min(range(len(slot)), key=lambda i: slot[i][2]))
        elif len(slot) < self.capacity:
            slot.append(item)
        else:
            weakest = min(range(len(slot)), key=lambda i: (slot[i][1], slot[i][2]))
            if item[1] > slot[weakest][1]:
                slot[weakest] = item

    def confidences(self, c):
        return [e[1] for e in self.entries.get(int(c), [])]

    def vectors(self, c):
        slot = self.entries.get(int(c), [])
        if not slot:
            return np.empty((0, self.dim or 0))
        return np.stack([e[0] for e in slot])

    def negatives(self, exclude):
        """All stored vectors of classes other than ``exclude``."""
        parts = [self.vectors(c) for c in sorted(self.entries) if c != exclude and self.entries[c]]
        return np.concatenate(parts) if parts else np.empty((0, self.dim or 0))

    def to_records(self):
        return {
            f"memo/{c}/{i:04d}": np.concatenate([[conf, counter], vec])
            for c, slot in self.entries.items()
            for i, (vec, conf, counter) in enumerate(slot)
        }

    @classmethod
    def from_records(cls, records, capacity, strategy):
        bank = cls(capacity, strategy)
        memo = sorted(
            (int(name.split("/")[1]), int(name.split("/")[2]), rec)
            for name, rec in records.items() if name.startswith("memo/")
        )
        for c, _, rec in memo:
            vec = np.asarray(rec[2:], dtype=np.float64)
            bank.entries.setdefault(c, []).append((vec, float(rec[0]), int(rec[1])))
            bank.dim = vec.size
        if memo:
            bank.counter = 1 + max(int(rec[1]) for _, _, rec in memo)
        return bank


def memory_update(bank, anchors):
    """Push every anchor (detached) into its class slot, classes ascending."""
    for c in anchors.classes():
        for vec, conf in zip(anchors.vectors(c), anchors.confidence[c]):
            bank.insert(c, vec, conf)
    return bank


def scl_loss(tape, anchors, centers, vessel_center, bank, cfg):
    """Structural contrastive loss averaged over classes that have anchors.

    For class c with anchors a and negatives B_c (other centers, the vessel
    center, other classes' memory entries)::

        term(a) = -log( exp(sim(a, mu_c)/t) / sum_{n in B_c} exp(sim(a, n)/t) )

    ``with_positive`` mode also puts the positive in the denominator.
    """
    classes = [c for c in anchors.classes() if c in centers]
    if not classes:
        raise ValueError("scl_loss: no class has anchors")
    inv_t = 1.0 / cfg.temperature
    terms = []
    for c in classes:
        a = tape.normalize_rows(tape.take_rows(anchors.features, anchors.rows[anchors.voxels[c]]))
        negs = [centers[k] for k in sorted(centers) if k != c]
        if vessel_center is not None:
            negs.append(vessel_center)
        if bank is not None:
            memo = bank.negatives(exclude=c)
            if len(memo):
                negs.append(tape.constant(memo))
        if not negs:
            raise ValueError(f"scl_loss: class {c} has no negatives")
        neg = tape.normalize_rows(tape.concat_rows(negs))
        pos = tape.normalize_rows(centers[c])
        s_pos = tape.scale(tape.sum(tape.mul(a, pos), axis=1, keepdims=True), inv_t)
        s_neg = tape.scale(tape.matmul(a, tape.transpose(neg)), inv_t)
        if cfg.denominator_mode == "with_positive":
            s_neg = tape.concat_cols([s_pos, s_neg])
        per_anchor = tape.sub(tape.logsumexp_rows(s_neg), tape.reshape(s_pos, (s_pos.shape[0],)))
        terms.append(tape.reshape(tape.mean(per_anchor), (1,)))
    return tape.mean(tape.concat_rows(terms))
