"""Base branch: temporal embedding, attention head, and snippet classifier.

The embedding is a single kernel-3 temporal convolution with ReLU. On top
of it sit a class-agnostic attention head (per-snippet foreground
probability) and a snippet classifier over C action classes plus one
background column, pooled into video-level scores by top-k means.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def pooling_k(num_snippets: int, divisor: int = 8) -> int:
    """Video-level pooling width: k = max(1, ceil(T / divisor))."""
    return max(1, math.ceil(num_snippets / divisor))


class ClassifierHead:
    """Shared parameters of the embedding, CA head, and snippet classifier."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator, prefix: str = "head"):
        d, c = feature_dim, num_classes
        self.feature_dim = d
        self.num_classes = c
        conv_fan = 3 * d
        self.conv_prev = Parameter(f"{prefix}.conv_prev", kaiming_uniform(rng, (d, d), conv_fan))
        self.conv_cur = Parameter(f"{prefix}.conv_cur", kaiming_uniform(rng, (d, d), conv_fan))
        self.conv_next = Parameter(f"{prefix}.conv_next", kaiming_uniform(rng, (d, d), conv_fan))
        self.conv_bias = Parameter(f"{prefix}.conv_bias", np.zeros(d))
        self.ca_w = Parameter(f"{prefix}.ca_w", kaiming_uniform(rng, (d, 1), d))
        self.ca_b = Parameter(f"{prefix}.ca_b", np.zeros(1))
        self.mil_w = Parameter(f"{prefix}.mil_w", kaiming_uniform(rng, (d, c + 1), d))
        self.mil_b = Parameter(f"{prefix}.mil_b", np.zeros(c + 1))

    def parameters(self) -> list[Parameter]:
        return [
            self.conv_prev,
            self.conv_cur,
            self.conv_next,
            self.conv_bias,
            self.ca_w,
            self.ca_b,
            self.mil_w,
            self.mil_b,
        ]

    def embed(self, features: Tensor) -> Tensor:
        """Temporal conv (kernel 3, zero padding 1) followed by ReLU; T x D in and out."""
        prev = ad.matmul(ad.shift_rows(features, 1), self.conv_prev)
        cur = ad.matmul(features, self.conv_cur)
        nxt = ad.matmul(ad.shift_rows(features, -1), self.conv_next)
        pre = ad.add_bias(ad.add(ad.add(prev, cur), nxt), self.conv_bias)
        return ad.relu(pre)

    def ca_attention(self, embedded: Tensor) -> Tensor:
        """Per-snippet foreground probability in (0, 1), shape (T,)."""
        z = ad.add_bias(ad.matmul(embedded, self.ca_w), self.ca_b)
        return ad.reshape(ad.sigmoid(z), (embedded.shape[0],))

    def mil_tcam(self, embedded: Tensor) -> Tensor:
        """Per-snippet class logits, shape T x (C+1); last column is background."""
        return ad.add_bias(ad.matmul(embedded, self.mil_w), self.mil_b)

    def suppressed_tcam(self, tcam_logits: Tensor, attention: Tensor) -> Tensor:
        """Attention-weighted logits used by the CA-path video score."""
        return ad.scale_rows(tcam_logits, attention)

    def pooled_logits(self, tcam_logits: Tensor, attention: Tensor, top_k_divisor: int = 8):
        """Top-k temporal mean of raw and attention-weighted logits, shape (C+1,) each."""
        k = pooling_k(tcam_logits.shape[0], top_k_divisor)
        mil = ad.topk_mean(tcam_logits, k, axis=0)
        ca = ad.topk_mean(self.suppressed_tcam(tcam_logits, attention), k, axis=0)
        return mil, ca

    def video_scores(self, tcam_logits: Tensor, attention: Tensor, top_k_divisor: int = 8):
        """Video-level class distributions for the MIL path and the CA path."""
        mil, ca = self.pooled_logits(tcam_logits, attention, top_k_divisor)
        return ad.softmax(mil, axis=0), ad.softmax(ca, axis=0)
