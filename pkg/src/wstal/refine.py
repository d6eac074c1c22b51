"""Boundary refinement: channel-wise and temporal-level interaction units.

The channel unit gates each snippet's channels with a softmax over an
FC-ReLU-FC bottleneck (squeeze-excitation style) plus a residual. The
temporal unit is plain dot-product attention of all snippets against a
key set. Refinement runs both units on the salient and non-salient
subsets separately (unshared bottlenecks) and fuses the two streams.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .model import kaiming_uniform
from .saliency import SaliencyPartition

logger = logging.getLogger(__name__)

FUSION_MODES = ("weighted_sum", "add", "a_only", "b_only", "self", "temporal_only")


class ConfigurationError(ValueError):
    pass


class InteractionUnit:
    """FC(D -> D/r) - ReLU - FC(D/r -> D) bottleneck for the channel gate."""

    def __init__(self, feature_dim: int, r: int, rng: np.random.Generator, prefix: str):
        if feature_dim % r != 0:
            raise ConfigurationError(f"feature_dim {feature_dim} not divisible by r={r}")
        hidden = feature_dim // r
        self.w1 = Parameter(f"{prefix}.w1", kaiming_uniform(rng, (feature_dim, hidden), feature_dim))
        self.b1 = Parameter(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = Parameter(f"{prefix}.w2", kaiming_uniform(rng, (hidden, feature_dim), hidden))
        self.b2 = Parameter(f"{prefix}.b2", np.zeros(feature_dim))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def bottleneck(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add_bias(ad.matmul(x, self.w1), self.b1))
        return ad.add_bias(ad.matmul(h, self.w2), self.b2)


def channel_interact(x: Tensor, unit: InteractionUnit) -> Tensor:
    """Residual channel gating: softmax over channels of the bottleneck output.

    With a zero bottleneck the gate is uniform 1/D, so the output is
    exactly (1 + 1/D) * x.
    """
    gate = ad.softmax(unit.bottleneck(x), axis=1)
    return ad.add(ad.mul(gate, x), x)


def temporal_interact(query: Tensor, keys: Tensor, scaled: bool = False) -> Tensor:
    """Dot-product attention: row-softmax(query keys^T) @ keys.

    ``scaled`` divides the affinities by sqrt(D); off by default since
    the refinement formulation uses raw products.
    """
    affinity = ad.matmul(query, ad.transpose(keys))
    if scaled:
        affinity = ad.scale(affinity, 1.0 / math.sqrt(query.shape[1]))
    return ad.matmul(ad.softmax(affinity, axis=1), keys)


def refine_boundaries(
    features: Tensor,
    partition: SaliencyPartition,
    unit_a: InteractionUnit,
    unit_b: InteractionUnit,
    sigma: float,
    fusion_mode: str = "weighted_sum",
    scaled_attention: bool = False,
) -> Tensor:
    """Fuse salient-enhanced and non-salient-enhanced views of all snippets.

    An empty salient or non-salient set falls back to the other stream
    alone. Fusion variants: 'weighted_sum' (sigma-weighted), 'add'
    (plain sum), 'a_only' / 'b_only' (single stream), 'self' (attention
    of the video against itself, no channel units, no partition), and
    'temporal_only' (skip the channel units).
    """
    if fusion_mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion_mode {fusion_mode!r}")
    if not 0.0 <= sigma <= 1.0:
        raise ConfigurationError("sigma must be in [0, 1]")
    if fusion_mode == "self":
        return temporal_interact(features, features, scaled_attention)

    salient = partition.salient_idx
    non_salient = partition.non_salient_idx
    if len(salient) + len(non_salient) != features.shape[0]:
        raise ConfigurationError("partition does not match feature count")

    def stream(idx, unit):
        subset = ad.gather_rows(features, idx)
        if fusion_mode != "temporal_only":
            subset = channel_interact(subset, unit)
        return temporal_interact(features, subset, scaled_attention)

    if len(salient) == 0:
        logger.warning("empty salient set; using non-salient stream only")
        return stream(non_salient, unit_b)
    if len(non_salient) == 0:
        logger.warning("empty non-salient set; using salient stream only")
        return stream(salient, unit_a)

    if fusion_mode == "a_only":
        return stream(salient, unit_a)
    if fusion_mode == "b_only":
        return stream(non_salient, unit_b)

    tilde_a = stream(salient, unit_a)
    tilde_b = stream(non_salient, unit_b)
    if fusion_mode == "add":
        return ad.add(tilde_a, tilde_b)
    if sigma == 1.0:
        return tilde_a
    if sigma == 0.0:
        return tilde_b
    return ad.add(ad.scale(tilde_a, sigma), ad.scale(tilde_b, 1.0 - sigma))
