"""Losses, pseudo-label supervision, and the training loop.

Training has two phases: a warm-up where only the base branch learns from
video-level labels, then a joint phase where refined and memory-enhanced
features produce per-snippet pseudo labels that supervise the base TCAM
through distillation. The pseudo target is detached: no gradient reaches
the refinement stack through it.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tensor, TrainingError
from .config import RunConfig
from .data import Dataset, VideoRecord
from .memory import (
    Candidate,
    MemoryBank,
    init_memory,
    load_memory,
    memory_interact,
    momentum_eta,
    save_memory,
    top_candidates,
    update_memory,
)
from .model import ClassifierHead
from .refine import InteractionUnit, refine_boundaries
from .saliency import SaliencyPartition, assign_labels, diff_values, random_partition, score_partition

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"WSTC"
_CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """-sum(target * log_softmax(logits)) for a rank-1 logit vector."""
    return ad.scale(ad.reduce_sum(ad.mul(Tensor(target), ad.log_softmax(logits, axis=0)), axis=None), -1.0)


def _normalized_label(label: np.ndarray, background_bit: float) -> np.ndarray:
    y = np.concatenate([label.astype(np.float64), [float(background_bit)]])
    return y / y.sum()


def loss_cls(
    pooled_mil: Tensor,
    pooled_ca: Tensor,
    label: np.ndarray,
    theta_mil: float,
    mil_bg_bit: float = 0.0,
    ca_bg_bit: float = 1.0,
) -> Tensor:
    """Video classification loss: CA-path CE plus theta-weighted MIL-path CE.

    Each term is cross-entropy between the pooled score distribution and
    the normalized label vector, with the background bit fixed per path.
    """
    label = np.asarray(label)
    if int(label.sum()) < 1:
        raise ValueError("video label must have at least one positive class")
    l_ca = cross_entropy(pooled_ca, _normalized_label(label, ca_bg_bit))
    l_mil = cross_entropy(pooled_mil, _normalized_label(label, mil_bg_bit))
    return ad.add(l_ca, ad.scale(l_mil, theta_mil))


@dataclass
class PseudoLabels:
    """Per-snippet class distributions from the refinement branches.

    ``target`` is the renormalized sum of the branch TCAMs, held as a
    plain array so that distillation treats it as a constant.
    """

    tcam_refined: Tensor
    tcam_enhanced: Tensor | None
    target: np.ndarray


def pseudo_tcams(head: ClassifierHead, refined: Tensor, enhanced: Tensor | None) -> PseudoLabels:
    """TCAMs of the refined branches through the full shared head."""
    t_refined = ad.softmax(head.mil_tcam(head.embed(refined)), axis=1)
    t_enhanced = (
        ad.softmax(head.mil_tcam(head.embed(enhanced)), axis=1) if enhanced is not None else None
    )
    target = t_refined.data.copy()
    if t_enhanced is not None:
        target = target + t_enhanced.data
    target = target / target.sum(axis=1, keepdims=True)
    return PseudoLabels(tcam_refined=t_refined, tcam_enhanced=t_enhanced, target=target)


def loss_kd(tcam_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-snippet KL(target || softmax(tcam)); target is constant."""
    t = tcam_logits.shape[0]
    entropy_term = float(np.sum(np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0)))
    cross = ad.reduce_sum(ad.mul(Tensor(target), ad.log_softmax(tcam_logits, axis=1)), axis=None)
    return ad.scale(cross, -1.0 / t) + entropy_term / t


def loss_att(attention: Tensor) -> Tensor:
    """Separation loss: mean of the bottom s attention values minus the top s.

    s = max(1, floor(T / 8)). Minimized when attention splits toward 0/1.
    """
    t = attention.shape[0]
    s = max(1, t // 8)
    top = ad.topk_mean(attention, s, axis=0)
    bottom = ad.scale(ad.topk_mean(ad.scale(attention, -1.0), s, axis=0), -1.0)
    return ad.sub(bottom, top)


def total_loss(l_cls: Tensor, l_kd: Tensor, l_att: Tensor, lambda_att: float) -> Tensor:
    for name, part in (("cls", l_cls), ("kd", l_kd), ("att", l_att)):
        if not np.isfinite(part.data):
            raise TrainingError(f"loss part '{name}' is not finite")
    return ad.add(ad.add(l_cls, l_kd), ad.scale(l_att, lambda_att))


# ---------------------------------------------------------------------------
# model assembly


class Model:
    """All trainable pieces wired per the run configuration."""

    def __init__(self, feature_dim: int, num_classes: int, config: RunConfig, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.config = config
        self.head = ClassifierHead(feature_dim, num_classes, rng, prefix="head")
        self.unit_a = InteractionUnit(feature_dim, config.bottleneck_r, rng, prefix="unit_a")
        self.unit_b = InteractionUnit(feature_dim, config.bottleneck_r, rng, prefix="unit_b")
        if config.share_pseudo_head:
            self.pseudo_head = self.head
        else:
            self.pseudo_head = ClassifierHead(feature_dim, num_classes, rng, prefix="pseudo_head")

    def parameters(self) -> list[Parameter]:
        params = self.head.parameters() + self.unit_a.parameters() + self.unit_b.parameters()
        if self.pseudo_head is not self.head:
            params += self.pseudo_head.parameters()
        return params

    def base_forward(self, features: np.ndarray):
        f = Tensor(np.asarray(features, dtype=np.float64))
        embedded = self.head.embed(f)
        tcam_logits = self.head.mil_tcam(embedded)
        attention = self.head.ca_attention(embedded)
        return f, tcam_logits, attention

    def refine(self, features: Tensor, partition: SaliencyPartition) -> Tensor:
        return refine_boundaries(
            features,
            partition,
            self.unit_a,
            self.unit_b,
            self.config.sigma,
            self.config.fusion_mode,
            self.config.scaled_attention,
        )


def make_partition(record: VideoRecord, config: RunConfig, rng_seed: int) -> SaliencyPartition | None:
    """Saliency partition for one video under the configured strategy.

    'classification' partitions depend on a trained head and are built
    separately; this returns None for them.
    """
    if config.diff_metric in ("l1", "l2", "cosine"):
        return assign_labels(
            diff_values(record.features, config.diff_metric),
            config.salient_ratio,
            config.saliency_mark,
        )
    if config.diff_metric == "random":
        return random_partition(record.num_snippets, config.salient_ratio, np.random.default_rng(rng_seed))
    return None


def classification_partitions(model: Model, records: list[VideoRecord], config: RunConfig):
    """Rank snippets by the head's max action-class probability (ablation)."""
    parts = {}
    for rec in records:
        _, tcam_logits, _ = model.base_forward(rec.features)
        probs = ad.softmax(tcam_logits, axis=1).data[:, : model.num_classes]
        parts[rec.video_id] = score_partition(probs.max(axis=1), config.salient_ratio)
    return parts


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    loss_cls: float
    loss_kd: float
    loss_att_weighted: float
    loss_total: float
    eta: float


@dataclass
class TrainResult:
    model: Model
    bank: MemoryBank
    log: list[EpochLog] = field(default_factory=list)
    partitions: dict[str, SaliencyPartition] = field(default_factory=dict)


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _context_free_scores(model: Model, features: np.ndarray) -> np.ndarray:
    """Per-snippet class probabilities of each raw feature on its own.

    The head scores the snippet as if it filled a whole segment (all
    three conv taps see the same feature). Salient snippets sit at
    segment boundaries, where the temporal conv smears neighboring
    evidence into the positional score; memory must store features whose
    own content carries the class, so candidates are scored context-free.
    """
    head = model.head
    f = np.asarray(features, dtype=np.float64)
    mixed = f @ (head.conv_prev.data + head.conv_cur.data + head.conv_next.data)
    embedded = np.maximum(mixed + head.conv_bias.data[None, :], 0.0)
    return _row_softmax(embedded @ head.mil_w.data + head.mil_b.data[None, :])


def _collect_candidates(model: Model, record: VideoRecord, partition: SaliencyPartition):
    """Salient snippet features scored per labeled class of the video."""
    out: dict[int, list[Candidate]] = {}
    probs = _context_free_scores(model, record.features)
    features = np.asarray(record.features, dtype=np.float64)
    for c in record.label_classes():
        cands = [
            Candidate(float(probs[t, c]), record.video_id, int(t), features[t].copy())
            for t in partition.salient_idx
        ]
        out[int(c)] = cands
    return out


def _merge_candidates(dst: dict[int, list[Candidate]], src: dict[int, list[Candidate]]):
    for c, cands in src.items():
        dst.setdefault(c, []).extend(cands)


def _apply_memory_update(bank: MemoryBank, per_class: dict[int, list[Candidate]], eta: float, mode: str):
    slots = bank.shape[1]
    for c in sorted(per_class):
        cands = per_class[c]
        if not cands:
            continue
        if mode == "ours":
            chosen = top_candidates(cands, slots)
            update_memory(
                bank,
                c,
                np.stack([x.feature for x in chosen]),
                np.array([x.score for x in chosen]),
                eta,
            )
        elif mode == "direct":
            chosen = top_candidates(cands, slots)
            n = len(chosen)
            bank.features[c, :n] = np.stack([x.feature for x in chosen])
            bank.scores[c, :n] = [x.score for x in chosen]
            if not bank.initialized[c]:
                for i in range(n, slots):
                    bank.features[c, i] = chosen[0].feature
                    bank.scores[c, i] = chosen[0].score
                bank.initialized[c] = True
                bank.partial[c] = n < slots
        else:  # momentum_all: no confidence selection, arrival order
            chosen = sorted(cands, key=lambda x: (x.video_id, x.snippet_idx))[:slots]
            update_memory(
                bank,
                c,
                np.stack([x.feature for x in chosen]),
                np.array([x.score for x in chosen]),
                eta,
            )


def initialize_memory(model: Model, records: list[VideoRecord], partitions, config: RunConfig) -> MemoryBank:
    bank = MemoryBank.empty(model.num_classes, config.memory_slots, model.feature_dim)
    per_class: dict[int, list[Candidate]] = {}
    for rec in records:
        _merge_candidates(per_class, _collect_candidates(model, rec, partitions[rec.video_id]))
    return init_memory(bank, per_class)


def _video_loss(model: Model, record: VideoRecord, partition, bank, joint: bool, config: RunConfig):
    features, tcam_logits, attention = model.base_forward(record.features)
    pooled_mil, pooled_ca = model.head.pooled_logits(tcam_logits, attention, config.top_k_divisor)
    l_cls = loss_cls(
        pooled_mil, pooled_ca, record.label, config.theta_mil, config.mil_bg_bit, config.ca_bg_bit
    )
    l_att = loss_att(attention)
    l_kd = Tensor(np.asarray(0.0))
    candidates: dict[int, list[Candidate]] = {}
    if joint and config.use_brm:
        refined = model.refine(features, partition)
        enhanced = None
        if config.use_dem:
            enhanced = memory_interact(refined, bank, record.label_classes().tolist())
            candidates = _collect_candidates(model, record, partition)
        pseudo = pseudo_tcams(model.pseudo_head, refined, enhanced)
        l_kd = loss_kd(tcam_logits, pseudo.target)
    total = total_loss(l_cls, l_kd, l_att, config.lambda_att)
    parts = (float(l_cls.data), float(l_kd.data), config.lambda_att * float(l_att.data))
    return total, parts, candidates


def train(dataset: Dataset, config: RunConfig) -> TrainResult:
    """Run the full schedule; deterministic for a fixed config and seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = Model(dataset.feature_dim, dataset.num_classes, config, rng)
    records = dataset.split("train")
    bank = MemoryBank.empty(dataset.num_classes, config.memory_slots, dataset.feature_dim)

    partitions: dict[str, SaliencyPartition] = {}
    for i, rec in enumerate(records):
        part = make_partition(rec, config, rng_seed=config.seed * 100003 + i)
        if part is not None:
            partitions[rec.video_id] = part

    result = TrainResult(model=model, bank=bank, partitions=partitions)
    if config.epochs == 0 or not records:
        return result

    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    warmup = config.warmup_epochs()
    for epoch in range(config.epochs):
        if epoch == warmup and config.use_brm:
            if config.diff_metric == "classification":
                partitions.update(classification_partitions(model, records, config))
                result.partitions = partitions
            if config.use_dem:
                initialize_memory_into(bank, model, records, partitions, config)
        joint = epoch >= warmup
        eta = momentum_eta(config.eta0, epoch, config.epochs) if (joint and config.use_dem) else 0.0

        order = rng.permutation(len(records))
        sums = np.zeros(4)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            batch_total = None
            batch_parts = np.zeros(3)
            batch_cands: dict[int, list[Candidate]] = {}
            for rec in batch:
                try:
                    video_total, parts, cands = _video_loss(
                        model, rec, partitions.get(rec.video_id), bank, joint, config
                    )
                except ad.NumericsError as exc:
                    raise TrainingError(
                        f"diverged at epoch {epoch}, video {rec.video_id}: {exc}"
                    ) from exc
                batch_total = video_total if batch_total is None else ad.add(batch_total, video_total)
                batch_parts += parts
                _merge_candidates(batch_cands, cands)
            batch_loss = ad.scale(batch_total, 1.0 / len(batch))
            if not np.isfinite(batch_loss.data):
                raise TrainingError(f"diverged at epoch {epoch}: non-finite batch loss")
            ad.backward(batch_loss)
            optimizer.step()
            if joint and config.use_dem:
                _apply_memory_update(bank, batch_cands, eta, config.memory_mode)
            sums += np.concatenate([batch_parts / len(batch), [float(batch_loss.data)]])
            batches += 1
        mean = sums / batches
        result.log.append(
            EpochLog(
                epoch=epoch,
                loss_cls=float(mean[0]),
                loss_kd=float(mean[1]),
                loss_att_weighted=float(mean[2]),
                loss_total=float(mean[3]),
                eta=eta,
            )
        )
    return result


def initialize_memory_into(bank: MemoryBank, model, records, partitions, config) -> None:
    fresh = initialize_memory(model, records, partitions, config)
    bank.features[:] = fresh.features
    bank.scores[:] = fresh.scores
    bank.initialized[:] = fresh.initialized
    bank.partial[:] = fresh.partial


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceOutput:
    activation: np.ndarray  # T x (C+1), rows are class distributions
    attention: np.ndarray  # (T,)
    video_probs: np.ndarray  # (C+1,) MIL-path distribution


def infer_video(model: Model, bank: MemoryBank, record: VideoRecord, config: RunConfig,
                partition: SaliencyPartition | None = None) -> InferenceOutput:
    """Forward one video through every enabled module; averages branch TCAMs.

    Memory interaction uses predicted video classes at or above the class
    threshold (argmax fallback) since true labels are unavailable at test
    time.
    """
    features, tcam_logits, attention = model.base_forward(record.features)
    pooled_mil, _ = model.head.pooled_logits(tcam_logits, attention, config.top_k_divisor)
    video_probs = ad.softmax(pooled_mil, axis=0).data
    maps = [_row_softmax(tcam_logits.data)]
    if config.use_brm:
        if partition is None:
            partition = make_partition(record, config, rng_seed=config.seed)
        if partition is None:  # classification strategy
            probs = _row_softmax(tcam_logits.data)[:, : model.num_classes]
            partition = score_partition(probs.max(axis=1), config.salient_ratio)
        refined = model.refine(features, partition)
        enhanced = None
        if config.use_dem:
            action_probs = video_probs[: model.num_classes]
            classes = [c for c in range(model.num_classes) if action_probs[c] >= config.class_threshold]
            if not classes:
                classes = [int(action_probs.argmax())]
            enhanced = memory_interact(refined, bank, classes)
        pseudo = pseudo_tcams(model.pseudo_head, refined, enhanced)
        maps.append(pseudo.tcam_refined.data)
        if pseudo.tcam_enhanced is not None:
            maps.append(pseudo.tcam_enhanced.data)
    activation = np.mean(maps, axis=0)
    return InferenceOutput(activation=activation, attention=attention.data, video_probs=video_probs)


# ---------------------------------------------------------------------------
# checkpoints


def _named_parameters(model: Model) -> list[Parameter]:
    return model.parameters()


def save_checkpoint(path: Path, model: Model, bank: MemoryBank, config: RunConfig, class_names: list[str]) -> None:
    """Binary checkpoint: header JSON (config, hash, classes, param table) + blobs."""
    params = _named_parameters(model)
    header = {
        "version": _CKPT_VERSION,
        "config": json.loads(config.to_json()),
        "config_hash": config.config_hash(),
        "class_names": list(class_names),
        "feature_dim": model.feature_dim,
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
        "memory_shape": list(bank.shape),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(p.data.astype("<f8").tobytes(order="C"))
        fh.write(bank.features.astype("<f8").tobytes())
        fh.write(bank.scores.astype("<f8").tobytes())
        fh.write(bank.initialized.astype(np.uint8).tobytes())
        fh.write(bank.partial.astype(np.uint8).tobytes())


def load_checkpoint(path: Path):
    """Rebuild (model, bank, config, class_names) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 6
    header = json.loads(raw[off : off + blob_len].decode())
    off += blob_len
    config = RunConfig.from_dict(header["config"])
    class_names = header["class_names"]
    model = Model(header["feature_dim"], len(class_names), config, np.random.default_rng(0))
    params = _named_parameters(model)
    if [p.name for p in params] != [entry["name"] for entry in header["params"]]:
        raise ValueError(f"{path}: parameter table mismatch")
    for p, entry in zip(params, header["params"]):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    c, n, d = header["memory_shape"]
    feats = np.frombuffer(raw, dtype="<f8", count=c * n * d, offset=off).reshape(c, n, d).copy()
    off += 8 * c * n * d
    scores = np.frombuffer(raw, dtype="<f8", count=c * n, offset=off).reshape(c, n).copy()
    off += 8 * c * n
    initialized = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off).astype(bool)
    off += c
    partial = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off).astype(bool)
    bank = MemoryBank(features=feats, scores=scores, initialized=initialized, partial=partial)
    return model, bank, config, class_names


__all__ = [
    "cross_entropy",
    "loss_cls",
    "loss_kd",
    "loss_att",
    "total_loss",
    "pseudo_tcams",
    "PseudoLabels",
    "Model",
    "train",
    "TrainResult",
    "EpochLog",
    "infer_video",
    "InferenceOutput",
    "initialize_memory",
    "make_partition",
    "save_checkpoint",
    "load_checkpoint",
    "save_memory",
    "load_memory",
]
