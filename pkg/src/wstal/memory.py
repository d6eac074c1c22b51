"""Per-class memory bank of high-confidence action snippet features.

Each class holds N feature slots sorted by descending classification
score. Slots are refreshed with a momentum whose coefficient follows a
softplus-shaped epoch schedule, and refined video features attend over
the slots of the video's classes to import dataset-wide class context.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .refine import temporal_interact

logger = logging.getLogger(__name__)

MEMORY_MODES = ("ours", "direct", "momentum_all")
_MEM_HEADER = struct.Struct("<4sIII")
_MEM_MAGIC = b"WMEM"


@dataclass
class MemoryBank:
    features: np.ndarray  # C x N x D float64
    scores: np.ndarray  # C x N
    initialized: np.ndarray  # bool per class
    partial: np.ndarray  # bool per class: fewer than N distinct candidates seen

    @classmethod
    def empty(cls, num_classes: int, slots: int, feature_dim: int) -> "MemoryBank":
        return cls(
            features=np.zeros((num_classes, slots, feature_dim)),
            scores=np.zeros((num_classes, slots)),
            initialized=np.zeros(num_classes, dtype=bool),
            partial=np.zeros(num_classes, dtype=bool),
        )

    @property
    def shape(self):
        return self.features.shape


@dataclass(frozen=True)
class Candidate:
    """A salient snippet proposed for a class slot; ordering breaks score ties."""

    score: float
    video_id: str
    snippet_idx: int
    feature: np.ndarray

    def sort_key(self):
        return (-self.score, self.video_id, self.snippet_idx)


def momentum_eta(eta0: float, epoch: int, total_epochs: int) -> float:
    """eta0 * ln(exp(epoch / total_epochs) + 1); increases with epoch."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    return eta0 * float(np.log(np.exp(epoch / total_epochs) + 1.0))


def top_candidates(candidates: list[Candidate], n: int) -> list[Candidate]:
    return sorted(candidates, key=Candidate.sort_key)[:n]


def init_memory(bank: MemoryBank, per_class_candidates: dict[int, list[Candidate]]) -> MemoryBank:
    """Fill each class with its N best-scoring candidates.

    Classes with fewer than N candidates repeat their best one and are
    marked partially initialized; classes with none stay uninitialized
    (zero slots, excluded from interaction until updated).
    """
    num_classes, slots, _ = bank.shape
    for c in range(num_classes):
        cands = top_candidates(per_class_candidates.get(c, []), slots)
        if not cands:
            logger.warning("class %d has no memory candidates; left uninitialized", c)
            continue
        for i in range(slots):
            pick = cands[i] if i < len(cands) else cands[0]
            bank.features[c, i] = pick.feature
            bank.scores[c, i] = pick.score
        bank.initialized[c] = True
        bank.partial[c] = len(cands) < slots
    return bank


def update_memory(bank: MemoryBank, class_id: int, new_feats: np.ndarray, new_scores: np.ndarray, eta: float) -> None:
    """Slot-wise momentum blend, rank i with rank i; scores keep the max.

    ``new_feats`` must arrive sorted by descending score. Fewer than N
    rows update only the matching top slots. An uninitialized class is
    assigned directly (eta treated as 1).
    """
    new_feats = np.asarray(new_feats, dtype=np.float64)
    new_scores = np.asarray(new_scores, dtype=np.float64)
    n = new_feats.shape[0]
    if n == 0:
        return
    slots = bank.shape[1]
    if not bank.initialized[class_id]:
        for i in range(slots):
            j = i if i < n else 0
            bank.features[class_id, i] = new_feats[j]
            bank.scores[class_id, i] = new_scores[j]
        bank.initialized[class_id] = True
        bank.partial[class_id] = n < slots
        return
    n = min(n, slots)
    bank.features[class_id, :n] = (1.0 - eta) * bank.features[class_id, :n] + eta * new_feats[:n]
    bank.scores[class_id, :n] = np.maximum(bank.scores[class_id, :n], new_scores[:n])


def memory_interact(refined: Tensor, bank: MemoryBank, class_ids) -> Tensor:
    """Attend the refined features over the memory slots of the given classes.

    Keys are the concatenated slots of every initialized class in
    ``class_ids``. With no initialized class the features pass through
    unchanged.
    """
    usable = [c for c in class_ids if bank.initialized[c]]
    if not usable:
        logger.warning("memory interaction skipped: no initialized class among %s", list(class_ids))
        return refined
    keys = Tensor(bank.features[usable].reshape(-1, bank.shape[2]))
    return temporal_interact(refined, keys)


def save_memory(path: Path, bank: MemoryBank) -> None:
    c, n, d = bank.shape
    with open(path, "wb") as fh:
        fh.write(_MEM_HEADER.pack(_MEM_MAGIC, c, n, d))
        fh.write(bank.features.astype("<f8").tobytes())
        fh.write(bank.scores.astype("<f8").tobytes())
        fh.write(bank.initialized.astype(np.uint8).tobytes())
        fh.write(bank.partial.astype(np.uint8).tobytes())


def load_memory(path: Path) -> MemoryBank:
    raw = Path(path).read_bytes()
    magic, c, n, d = _MEM_HEADER.unpack_from(raw)
    if magic != _MEM_MAGIC:
        raise ValueError(f"{path}: bad memory checkpoint magic {magic!r}")
    off = _MEM_HEADER.size
    feats = np.frombuffer(raw, dtype="<f8", count=c * n * d, offset=off).reshape(c, n, d).copy()
    off += 8 * c * n * d
    scores = np.frombuffer(raw, dtype="<f8", count=c * n, offset=off).reshape(c, n).copy()
    off += 8 * c * n
    initialized = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off).astype(bool)
    off += c
    partial = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off).astype(bool)
    return MemoryBank(features=feats, scores=scores, initialized=initialized, partial=partial)
