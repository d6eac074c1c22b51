"""Neighbor difference values and the salient / non-salient snippet split.

Temporally adjacent snippet pairs with a large feature difference mark
junctions (action/background transitions, abrupt content changes). The
top-K pairs, by a configurable distance, label their snippets as salient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DIFF_METRICS = ("l1", "l2", "cosine")

# Which snippet of a selected pair (t-1, t) becomes salient.
MARK_RULES = ("later", "earlier", "both")


@dataclass(frozen=True)
class DifferenceSet:
    """Per-pair difference values; tau[i] compares snippets i and i+1."""

    tau: np.ndarray
    metric: str

    def __post_init__(self):
        if self.tau.ndim != 1:
            raise ValueError("tau must be a vector")


@dataclass(frozen=True)
class SaliencyPartition:
    """Binary snippet labels b plus the realized salient count K."""

    b: np.ndarray
    K: int

    @property
    def salient_idx(self) -> np.ndarray:
        return np.flatnonzero(self.b == 1)

    @property
    def non_salient_idx(self) -> np.ndarray:
        return np.flatnonzero(self.b == 0)


def diff_values(features: np.ndarray, metric: str = "l1") -> DifferenceSet:
    """Difference value for every adjacent snippet pair of a T x D matrix.

    l1 sums absolute per-dimension differences, l2 is the Euclidean norm
    of the difference, cosine is 1 - cos(f_t, f_{t+1}). A zero-norm
    snippet makes cosine undefined; such pairs get the maximum value 1.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need a T x D matrix with T >= 2")
    if metric not in DIFF_METRICS:
        raise ValueError(f"unknown diff metric {metric!r}")
    delta = f[1:] - f[:-1]
    if metric == "l1":
        tau = np.abs(delta).sum(axis=1)
    elif metric == "l2":
        tau = np.sqrt((delta * delta).sum(axis=1))
    else:
        norms = np.linalg.norm(f, axis=1)
        pair_norm = norms[:-1] * norms[1:]
        zero = pair_norm == 0.0
        if zero.any():
            logger.warning("cosine diff with %d zero-norm snippet pair(s); using 1", int(zero.sum()))
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(zero, 0.0, (f[:-1] * f[1:]).sum(axis=1) / np.where(zero, 1.0, pair_norm))
        tau = 1.0 - np.clip(cos, -1.0, 1.0)
        tau[zero] = 1.0
    return DifferenceSet(tau=tau, metric=metric)


def requested_salient_count(T: int, salient_ratio: float) -> int:
    """K = floor(ratio * T), floored at 1 so the salient set is never empty."""
    if not 0.0 < salient_ratio <= 1.0:
        raise ValueError("salient_ratio must be in (0, 1]")
    return max(1, int(np.floor(salient_ratio * T)))


def assign_labels(
    diffs: DifferenceSet,
    salient_ratio: float,
    mark: str = "later",
) -> SaliencyPartition:
    """Label the K snippets behind the largest difference values as salient.

    Pairs are ranked by descending tau with ties broken by the earlier
    pair index. A selected pair (t-1, t) marks snippet t under the
    default rule; snippet 0 stays non-salient. Pairs are consumed in
    rank order until K snippets are marked or pairs run out, so the
    realized K can fall short of the request.
    """
    if mark not in MARK_RULES:
        raise ValueError(f"unknown mark rule {mark!r}")
    tau = diffs.tau
    T = tau.shape[0] + 1
    k_req = requested_salient_count(T, salient_ratio)
    order = np.argsort(-tau, kind="stable")
    b = np.zeros(T, dtype=np.int8)
    marked = 0
    for pair in order:
        if marked >= k_req:
            break
        targets = {"later": (pair + 1,), "earlier": (pair,), "both": (pair, pair + 1)}[mark]
        for t in targets:
            if b[t] == 0:
                b[t] = 1
                marked += 1
    return SaliencyPartition(b=b, K=int(b.sum()))


def selected_pairs(diffs: DifferenceSet, k: int) -> np.ndarray:
    """Indices of the k largest difference pairs, rank order, stable ties."""
    if not 1 <= k <= diffs.tau.shape[0]:
        raise ValueError("k out of range")
    return np.argsort(-diffs.tau, kind="stable")[:k]


def random_partition(T: int, salient_ratio: float, rng: np.random.Generator) -> SaliencyPartition:
    """Seeded random label assignment at the same K (ablation baseline)."""
    k = min(requested_salient_count(T, salient_ratio), T)
    b = np.zeros(T, dtype=np.int8)
    b[rng.choice(T, size=k, replace=False)] = 1
    return SaliencyPartition(b=b, K=int(b.sum()))


def score_partition(scores: np.ndarray, salient_ratio: float) -> SaliencyPartition:
    """Rank snippets by a per-snippet score instead of neighbor differences.

    Used by the 'classification' ablation: scores come from a pre-trained
    classification head. Ties break toward the earlier snippet.
    """
    scores = np.asarray(scores, dtype=np.float64)
    T = scores.shape[0]
    k = min(requested_salient_count(T, salient_ratio), T)
    order = np.argsort(-scores, kind="stable")
    b = np.zeros(T, dtype=np.int8)
    b[order[:k]] = 1
    return SaliencyPartition(b=b, K=int(b.sum()))
