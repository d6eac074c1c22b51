"""Dataset formats, loading, and the synthetic benchmark generator.

On-disk layout is a small text manifest plus one binary feature file per
video (float32, snippet rows), with an optional ground-truth segments
file. The synthetic generator plants alternating background / action
segments with a controllable boundary contrast-to-noise ratio so that
transition recovery can be verified exactly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"ISSF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, T, D

MANIFEST_NAME = "manifest.txt"
MIN_SEGMENT_LEN = 2


class LoadError(RuntimeError):
    """A dataset file is missing, corrupt, or inconsistent with its manifest."""


@dataclass
class VideoRecord:
    """One untrimmed video: snippet features, weak label, optional ground truth."""

    video_id: str
    split: str
    features: np.ndarray  # float32, T x D
    label: np.ndarray  # uint8 multi-hot over C classes
    fps_per_snippet: float = 1.0
    gt_segments: list[tuple[int, float, float]] | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValueError(f"{self.video_id}: features must be T x D with T >= 2")
        if self.split == "train" and int(self.label.sum()) < 1:
            raise ValueError(f"{self.video_id}: training video needs at least one label")
        if self.fps_per_snippet <= 0:
            raise ValueError(f"{self.video_id}: fps_per_snippet must be positive")
        for _, start, end in self.gt_segments or ():
            if not 0 <= start < end:
                raise ValueError(f"{self.video_id}: bad gt segment ({start}, {end})")

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    def label_classes(self) -> np.ndarray:
        return np.flatnonzero(self.label)


@dataclass
class Dataset:
    class_names: list[str]
    feature_dim: int
    records: list[VideoRecord] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the planted-segment generator.

    boundary_contrast / noise_sigma is the signal-to-noise ratio of the
    planted transitions; the seed fully determines the output.
    """

    num_classes: int = 3
    feature_dim: int = 32
    videos_per_class: int = 20
    test_videos_per_class: int = 10
    snippets_range: tuple[int, int] = (36, 44)
    segments_range: tuple[int, int] = (2, 4)
    boundary_contrast: float = 0.8
    noise_sigma: float = 0.1
    class_similarity: float = 0.7
    instance_sigma: float = 0.3
    secondary_class_prob: float = 0.4
    fps_per_snippet: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("num_classes and feature_dim must be positive")
        if self.videos_per_class < 1 or self.test_videos_per_class < 0:
            raise ValueError("need at least one training video per class")
        t_min, t_max = self.snippets_range
        s_min, s_max = self.segments_range
        if not (2 <= t_min <= t_max) or not (1 <= s_min <= s_max):
            raise ValueError("invalid snippets_range or segments_range")
        if (2 * s_max + 1) * MIN_SEGMENT_LEN > t_min:
            raise ValueError(
                f"segments do not fit: {s_max} action segments need at least "
                f"{(2 * s_max + 1) * MIN_SEGMENT_LEN} snippets, range starts at {t_min}"
            )
        if self.boundary_contrast < 0 or self.noise_sigma < 0:
            raise ValueError("boundary_contrast and noise_sigma must be >= 0")
        if not 0.0 <= self.class_similarity < 1.0:
            raise ValueError("class_similarity must be in [0, 1)")
        if not 0.0 <= self.instance_sigma < 1.0:
            raise ValueError("instance_sigma must be in [0, 1)")
        if not 0.0 <= self.secondary_class_prob <= 1.0:
            raise ValueError("secondary_class_prob must be a probability")


def write_feature_file(path: Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype=np.float32)
    t, d = features.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, t, d))
        fh.write(features.astype("<f4").tobytes(order="C"))


def read_feature_file(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, _, t, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(t, d).copy()


def _format_labels(record: VideoRecord, class_names: list[str]) -> str:
    names = [class_names[c] for c in record.label_classes()]
    return "|".join(names) if names else "-"


def write_gt_file(path: Path, dataset: Dataset) -> None:
    lines = []
    for rec in dataset.records:
        for cls, start, end in rec.gt_segments or ():
            lines.append(f"{rec.video_id},{dataset.class_names[cls]},{start:.6f},{end:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_gt_file(path: Path, class_names: list[str]) -> dict[str, list[tuple[int, float, float]]]:
    by_video: dict[str, list[tuple[int, float, float]]] = {}
    index = {name: i for i, name in enumerate(class_names)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise LoadError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        vid, cls_name, start, end = parts
        if cls_name not in index:
            raise LoadError(f"{path}:{lineno}: unknown class name {cls_name!r}")
        by_video.setdefault(vid, []).append((index[cls_name], float(start), float(end)))
    return by_video


def write_dataset(dataset: Dataset, out_dir: Path) -> Path:
    """Write manifest + feature files (+ gt file when present); returns manifest path.

    Output is deterministic: identical datasets produce byte-identical
    files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    has_gt = any(rec.gt_segments for rec in dataset.records)

    lines = [
        "# wstal dataset manifest (format v1)",
        "version 1",
        f"feature_dim {dataset.feature_dim}",
        "classes " + ",".join(dataset.class_names),
    ]
    if has_gt:
        lines.append("gt_file ground_truth.csv")
    lines.append("videos:")
    for rec in dataset.records:
        feat_rel = f"features/{rec.video_id}.feat"
        write_feature_file(out_dir / feat_rel, rec.features)
        lines.append(
            f"{rec.video_id} {rec.split} {rec.num_snippets} {rec.fps_per_snippet:g} "
            f"{_format_labels(rec, dataset.class_names)} {feat_rel}"
        )
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    if has_gt:
        write_gt_file(out_dir / "ground_truth.csv", dataset)
    return manifest


def _parse_label(token: str, index: dict[str, int], num_classes: int, where: str) -> np.ndarray:
    label = np.zeros(num_classes, dtype=np.uint8)
    if token == "-":
        return label
    for name in token.split("|"):
        if name not in index:
            raise LoadError(f"{where}: unknown class name {name!r}")
        label[index[name]] = 1
    return label


def load_dataset(manifest_path: Path) -> Dataset:
    """Parse a manifest and load every referenced feature file.

    A video row may reference two feature files joined by '+'; they are
    concatenated along the feature axis (separate appearance / motion
    dumps).
    """
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise LoadError(f"{manifest_path}: {exc}") from exc
    base = manifest_path.parent

    feature_dim = None
    class_names: list[str] = []
    gt_rel = None
    video_rows: list[tuple[int, list[str]]] = []
    in_table = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if in_table:
            video_rows.append((lineno, line.split()))
            continue
        if line == "videos:":
            in_table = True
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if key == "version":
            if value != "1":
                raise LoadError(f"{manifest_path}:{lineno}: unsupported version {value}")
        elif key == "feature_dim":
            feature_dim = int(value)
        elif key == "classes":
            class_names = [c for c in value.split(",") if c]
        elif key == "gt_file":
            gt_rel = value
        else:
            raise LoadError(f"{manifest_path}:{lineno}: unknown key {key!r}")
    if feature_dim is None or not class_names:
        raise LoadError(f"{manifest_path}: missing feature_dim or classes")

    index = {name: i for i, name in enumerate(class_names)}
    gt = read_gt_file(base / gt_rel, class_names) if gt_rel else {}

    records = []
    for lineno, parts in video_rows:
        where = f"{manifest_path}:{lineno}"
        if len(parts) != 6:
            raise LoadError(f"{where}: expected 6 columns, got {len(parts)}")
        vid, split, t_str, fps_str, label_tok, path_tok = parts
        pieces = [read_feature_file(base / rel) for rel in path_tok.split("+")]
        features = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=1)
        if features.shape != (int(t_str), feature_dim):
            raise LoadError(
                f"{where}: {path_tok} has shape {features.shape}, "
                f"manifest declares ({t_str}, {feature_dim})"
            )
        try:
            records.append(
                VideoRecord(
                    video_id=vid,
                    split=split,
                    features=features,
                    label=_parse_label(label_tok, index, len(class_names), where),
                    fps_per_snippet=float(fps_str),
                    gt_segments=gt.get(vid),
                )
            )
        except ValueError as exc:
            raise LoadError(f"{where}: {exc}") from exc
    return Dataset(class_names=class_names, feature_dim=feature_dim, records=records)


def _segment_lengths(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    extra = total - parts * MIN_SEGMENT_LEN
    return MIN_SEGMENT_LEN + rng.multinomial(extra, np.full(parts, 1.0 / parts))


def planted_transitions(record: VideoRecord) -> np.ndarray:
    """Pair indices at planted segment boundaries, from gt in snippet units."""
    pairs = set()
    for _, start, end in record.gt_segments or ():
        s = int(round(start / record.fps_per_snippet))
        e = int(round(end / record.fps_per_snippet))
        if s >= 1:
            pairs.add(s - 1)
        if e <= record.num_snippets - 1:
            pairs.add(e - 1)
    return np.array(sorted(pairs), dtype=np.intp)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Plant alternating background / action segments as noisy prototypes.

    Action classes share a common direction blended per class_similarity
    (higher = more confusable classes); each planted segment adds a
    per-instance offset of relative size instance_sigma (cross-video
    intra-class variety). Per-video background prototypes are orthogonal
    to every action prototype, so temporally adjacent segments always
    differ by more than boundary_contrast * sqrt(D) before noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    scale = spec.boundary_contrast * np.sqrt(d)

    # Equiangular class directions: pairwise cosine is exactly
    # class_similarity. Needs C+1 orthonormal directions; falls back to
    # independent random directions when D is too small.
    if spec.num_classes + 1 <= d:
        basis = np.linalg.qr(rng.standard_normal((d, spec.num_classes + 1)))[0].T
        shared, own = basis[0], basis[1:]
        rho = spec.class_similarity
        directions = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own
    else:
        directions = rng.standard_normal((spec.num_classes, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    prototypes = scale * directions

    def background_prototype():
        # Orthogonalize against the action prototypes; adjacent-segment
        # distance then exceeds sqrt(2) * boundary_contrast * sqrt(D)
        # even with instance offsets (|offset| <= instance_sigma * scale).
        v = rng.standard_normal(d)
        basis = np.linalg.qr(directions.T)[0][:, : spec.num_classes]
        v = v - basis @ (basis.T @ v)
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            return np.zeros(d)
        return scale * v / norm

    def instance_offset():
        if spec.instance_sigma == 0.0:
            return np.zeros(d)
        v = rng.standard_normal(d)
        return spec.instance_sigma * scale * v / np.linalg.norm(v)

    class_names = [f"action_{chr(ord('a') + c)}" if spec.num_classes <= 26 else f"action_{c}"
                   for c in range(spec.num_classes)]
    records = []
    plan = [("train", spec.videos_per_class), ("test", spec.test_videos_per_class)]
    counter = 0
    for split, per_class in plan:
        for primary in range(spec.num_classes):
            for _ in range(per_class):
                t = int(rng.integers(spec.snippets_range[0], spec.snippets_range[1] + 1))
                n_seg = int(rng.integers(spec.segments_range[0], spec.segments_range[1] + 1))
                lengths = _segment_lengths(t, 2 * n_seg + 1, rng)
                video_background = background_prototype()
                features = np.zeros((t, d), dtype=np.float64)
                gt: list[tuple[int, float, float]] = []
                label = np.zeros(spec.num_classes, dtype=np.uint8)
                cursor = 0
                for seg_idx, seg_len in enumerate(lengths):
                    if seg_idx % 2 == 1:
                        cls = primary
                        if spec.num_classes > 1 and rng.random() < spec.secondary_class_prob:
                            others = [c for c in range(spec.num_classes) if c != primary]
                            cls = int(rng.choice(others))
                        features[cursor : cursor + seg_len] = prototypes[cls] + instance_offset()
                        label[cls] = 1
                        gt.append(
                            (cls, cursor * spec.fps_per_snippet, (cursor + seg_len) * spec.fps_per_snippet)
                        )
                    else:
                        features[cursor : cursor + seg_len] = video_background
                    cursor += seg_len
                if spec.noise_sigma > 0:
                    features += rng.normal(0.0, spec.noise_sigma, size=(t, d))
                records.append(
                    VideoRecord(
                        video_id=f"synth_{counter:04d}",
                        split=split,
                        features=features.astype(np.float32),
                        label=label,
                        fps_per_snippet=spec.fps_per_snippet,
                        gt_segments=gt,
                    )
                )
                counter += 1
    return Dataset(class_names=class_names, feature_dim=d, records=records)
