"""Run configuration: every hyper-parameter of the pipeline in one place.

Configs load from JSON, validate eagerly, and hash canonically; the hash
is embedded in checkpoints and reports so any output can be traced back
to its exact settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .refine import FUSION_MODES
from .memory import MEMORY_MODES
from .saliency import MARK_RULES

DIFF_STRATEGIES = ("l1", "l2", "cosine", "random", "classification")
MODULE_STACKS = ("base", "base+brm", "base+brm+dem")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # saliency
    diff_metric: str = "l1"
    salient_ratio: float = 0.5
    saliency_mark: str = "later"
    # boundary refinement
    sigma: float = 0.88
    bottleneck_r: int = 4
    fusion_mode: str = "weighted_sum"
    scaled_attention: bool = False
    # discrimination enhancement
    memory_slots: int = 8
    eta0: float = 0.1
    memory_mode: str = "ours"
    # losses
    lambda_att: float = 0.1
    theta_mil: float = 0.2
    mil_bg_bit: float = 0.0
    ca_bg_bit: float = 1.0
    # training
    modules: str = "base+brm+dem"
    learning_rate: float = 5e-5
    batch_size: int = 10
    epochs: int = 180
    warmup_fraction: float = 0.1
    share_pseudo_head: bool = True
    top_k_divisor: int = 8
    seed: int = 0
    # localization / evaluation
    class_threshold: float = 0.1
    proposal_thresholds: list[float] = field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)]
    )
    flank_fraction: float = 0.25
    nms_iou: float = 0.5
    iou_thresholds: list[float] = field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 8)]
    )
    include_absent_classes: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            (self.diff_metric in DIFF_STRATEGIES, f"diff_metric must be one of {DIFF_STRATEGIES}"),
            (0.0 < self.salient_ratio <= 1.0, "salient_ratio must be in (0, 1]"),
            (self.saliency_mark in MARK_RULES, f"saliency_mark must be one of {MARK_RULES}"),
            (0.0 <= self.sigma <= 1.0, "sigma must be in [0, 1]"),
            (self.bottleneck_r >= 1, "bottleneck_r must be a positive integer"),
            (self.fusion_mode in FUSION_MODES, f"fusion_mode must be one of {FUSION_MODES}"),
            (self.memory_slots >= 1, "memory_slots must be >= 1"),
            (0.0 < self.eta0 < 1.0, "eta0 must be in (0, 1)"),
            (self.memory_mode in MEMORY_MODES, f"memory_mode must be one of {MEMORY_MODES}"),
            (self.lambda_att >= 0 and self.theta_mil >= 0, "loss weights must be >= 0"),
            (self.modules in MODULE_STACKS, f"modules must be one of {MODULE_STACKS}"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0.0 <= self.warmup_fraction <= 1.0, "warmup_fraction must be in [0, 1]"),
            (self.top_k_divisor >= 1, "top_k_divisor must be >= 1"),
            (0.0 <= self.class_threshold <= 1.0, "class_threshold must be in [0, 1]"),
            (all(0 < t < 1 for t in self.proposal_thresholds), "proposal_thresholds in (0, 1)"),
            (0.0 <= self.flank_fraction <= 1.0, "flank_fraction must be in [0, 1]"),
            (0.0 < self.nms_iou <= 1.0, "nms_iou must be in (0, 1]"),
            (all(0 < t <= 1 for t in self.iou_thresholds), "iou_thresholds in (0, 1]"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    @property
    def use_brm(self) -> bool:
        return self.modules in ("base+brm", "base+brm+dem")

    @property
    def use_dem(self) -> bool:
        return self.modules == "base+brm+dem"

    def warmup_epochs(self) -> int:
        if self.modules == "base":
            return self.epochs
        return max(1, round(self.warmup_fraction * self.epochs)) if self.epochs else 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        data = asdict(self)
        data.update(overrides)
        return RunConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def synthetic_defaults(cls, **overrides) -> "RunConfig":
        """Settings scaled for the desk-size synthetic benchmark."""
        base = dict(
            epochs=40,
            learning_rate=5e-4,
            batch_size=10,
            memory_slots=8,
        )
        base.update(overrides)
        return cls(**base).validate()
