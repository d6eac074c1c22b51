"""Proposal generation, temporal NMS, and mAP@IoU evaluation.

TCAM activations become temporal proposals by multi-threshold run
extraction with outer-inner contrast scoring; detections are matched
greedily to ground truth per class and threshold, and AP uses all-point
interpolation over the precision-recall staircase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ActionProposal:
    video_id: str
    class_id: int
    score: float
    t_start: float
    t_end: float

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"degenerate proposal [{self.t_start}, {self.t_end})")

    @property
    def segment(self):
        return (self.t_start, self.t_end)


def temporal_iou(a, b) -> float:
    """Intersection over union of two (start, end) segments, in [0, 1]."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def nms(proposals: list[ActionProposal], iou_threshold: float = 0.5) -> list[ActionProposal]:
    """Greedy suppression of one class's proposals, highest score first.

    Ties in score break toward the earlier start time. A proposal is
    dropped when its IoU with any kept proposal exceeds the threshold.
    """
    pending = sorted(proposals, key=lambda p: (-p.score, p.t_start, p.t_end))
    kept: list[ActionProposal] = []
    for cand in pending:
        if all(temporal_iou(cand.segment, k.segment) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def run_score(values: np.ndarray, start: int, end: int, flank_fraction: float = 0.25) -> float:
    """Outer-inner contrast of the inclusive run [start, end].

    Mean activation inside the run minus the mean over flanking regions
    sized at ``flank_fraction`` of the run length (at least one snippet)
    on each side; an empty outer region contributes 0.
    """
    run_len = end - start + 1
    flank = max(1, int(round(flank_fraction * run_len)))
    inner = float(values[start : end + 1].mean())
    outer_vals = np.concatenate([values[max(0, start - flank) : start], values[end + 1 : end + 1 + flank]])
    outer = float(outer_vals.mean()) if outer_vals.size else 0.0
    return inner - outer


def _runs_above(values: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal [i, j] index runs with values strictly above the threshold."""
    above = values > threshold
    runs = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(above) - 1))
    return runs


def generate_proposals(
    video_id: str,
    activation: np.ndarray,
    attention: np.ndarray,
    video_probs: np.ndarray,
    fps_per_snippet: float,
    num_classes: int,
    class_threshold: float = 0.1,
    thresholds=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    flank_fraction: float = 0.25,
    nms_iou: float = 0.5,
) -> list[ActionProposal]:
    """Extract scored proposals from one video's activation map.

    For every action class whose video-level probability passes the
    class threshold, the attention-weighted activation is min-max
    normalized and thresholded at several levels; each maximal run scores
    its inner mean minus the mean of flanking regions (25% of the run
    length on each side, 0 when empty) plus the class probability.
    """
    activation = np.asarray(activation, dtype=np.float64)
    proposals: list[ActionProposal] = []
    for c in range(num_classes):
        if video_probs[c] < class_threshold:
            continue
        weighted = activation[:, c] * attention
        lo, hi = weighted.min(), weighted.max()
        if hi <= lo:
            continue
        norm = (weighted - lo) / (hi - lo)
        seen: set[tuple[int, int]] = set()
        for thr in thresholds:
            seen.update(_runs_above(norm, thr))
        class_props = [
            ActionProposal(
                video_id=video_id,
                class_id=c,
                score=run_score(norm, i, j, flank_fraction) + float(video_probs[c]),
                t_start=i * fps_per_snippet,
                t_end=(j + 1) * fps_per_snippet,
            )
            for i, j in sorted(seen)
        ]
        proposals.extend(nms(class_props, nms_iou))
    return proposals


@dataclass
class EvalReport:
    """Per-class AP table over IoU thresholds plus range averages.

    Classes without ground truth hold NaN and are excluded from the mean
    unless the report was built with include_absent_classes.
    """

    thresholds: list[float]
    class_names: list[str]
    per_class_ap: np.ndarray  # C x len(thresholds), NaN = class absent from gt
    map_per_threshold: np.ndarray = field(init=False)

    def __post_init__(self):
        with np.errstate(invalid="ignore"):
            self.map_per_threshold = np.nanmean(self.per_class_ap, axis=0)

    def average_map(self, lo: float, hi: float) -> float:
        included = [
            self.map_per_threshold[i]
            for i, t in enumerate(self.thresholds)
            if lo - 1e-9 <= t <= hi + 1e-9
        ]
        return float(np.mean(included))

    def standard_averages(self) -> dict[str, float]:
        return {
            "AVG(0.1:0.5)": self.average_map(0.1, 0.5),
            "AVG(0.3:0.7)": self.average_map(0.3, 0.7),
            "AVG(0.1:0.7)": self.average_map(0.1, 0.7),
        }

    def to_csv(self, config_hash: str = "") -> str:
        header = ["class"] + [f"{t:g}" for t in self.thresholds] + list(self.standard_averages())
        lines = []
        if config_hash:
            lines.append(f"# config_hash={config_hash}")
        lines.append(",".join(header))
        for c, name in enumerate(self.class_names):
            row = self.per_class_ap[c]
            cells = ["nan" if np.isnan(v) else f"{v:.6f}" for v in row]
            row_avgs = [self._class_average(c, key) for key in self.standard_averages()]
            lines.append(",".join([name] + cells + row_avgs))
        avg_cells = [f"{v:.6f}" for v in self.map_per_threshold]
        avgs = [f"{v:.6f}" for v in self.standard_averages().values()]
        lines.append(",".join(["mAP"] + avg_cells + avgs))
        return "\n".join(lines) + "\n"

    def _class_average(self, c: int, key: str) -> str:
        lo, hi = {
            "AVG(0.1:0.5)": (0.1, 0.5),
            "AVG(0.3:0.7)": (0.3, 0.7),
            "AVG(0.1:0.7)": (0.1, 0.7),
        }[key]
        vals = [
            self.per_class_ap[c, i]
            for i, t in enumerate(self.thresholds)
            if lo - 1e-9 <= t <= hi + 1e-9
        ]
        mean = float(np.mean(vals))
        return "nan" if np.isnan(mean) else f"{mean:.6f}"

    def to_text(self, config_hash: str = "") -> str:
        lines = []
        if config_hash:
            lines.append(f"config_hash: {config_hash}")
        head = f"{'class':<16}" + "".join(f"{t:>8g}" for t in self.thresholds)
        head += "".join(f"{k:>14}" for k in self.standard_averages())
        lines.append(head)
        for c, name in enumerate(self.class_names):
            row = f"{name:<16}"
            for v in self.per_class_ap[c]:
                row += f"{'  -':>8}" if np.isnan(v) else f"{100 * v:>8.2f}"
            for key in self.standard_averages():
                cell = self._class_average(c, key)
                row += f"{'  -':>14}" if cell == "nan" else f"{100 * float(cell):>14.2f}"
            lines.append(row)
        total = f"{'mAP':<16}" + "".join(f"{100 * v:>8.2f}" for v in self.map_per_threshold)
        total += "".join(f"{100 * v:>14.2f}" for v in self.standard_averages().values())
        lines.append(total)
        return "\n".join(lines) + "\n"


def _ap_interpolated(tp: np.ndarray, fp: np.ndarray, npos: int) -> float:
    """All-point interpolated AP from cumulative TP/FP counts."""
    if npos == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / npos
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def mean_average_precision(
    proposals: list[ActionProposal],
    gt_by_video: dict[str, list[tuple[int, float, float]]],
    num_classes: int,
    class_names: list[str],
    thresholds,
    include_absent_classes: bool = False,
) -> EvalReport:
    """Greedy-matched AP per class and IoU threshold.

    Proposals are visited in descending score order (ties by video id,
    then start time); each claims the unmatched ground-truth segment with
    the highest IoU at or above the threshold.
    """
    if not any(gt_by_video.values()):
        raise ValueError("no ground-truth segments to evaluate against")
    thresholds = list(thresholds)
    ap = np.full((num_classes, len(thresholds)), np.nan)
    for c in range(num_classes):
        gt_segments = {
            vid: [(s, e) for cls, s, e in segs if cls == c] for vid, segs in gt_by_video.items()
        }
        npos = sum(len(v) for v in gt_segments.values())
        if npos == 0:
            if include_absent_classes:
                ap[c, :] = 0.0
            continue
        class_props = sorted(
            (p for p in proposals if p.class_id == c),
            key=lambda p: (-p.score, p.video_id, p.t_start),
        )
        for ti, thr in enumerate(thresholds):
            matched: dict[str, set[int]] = {}
            tp = np.zeros(len(class_props))
            fp = np.zeros(len(class_props))
            for pi, prop in enumerate(class_props):
                segs = gt_segments.get(prop.video_id, [])
                used = matched.setdefault(prop.video_id, set())
                best_iou, best_idx = 0.0, -1
                for gi, seg in enumerate(segs):
                    if gi in used:
                        continue
                    iou = temporal_iou(prop.segment, seg)
                    if iou > best_iou:
                        best_iou, best_idx = iou, gi
                if best_idx >= 0 and best_iou >= thr:
                    used.add(best_idx)
                    tp[pi] = 1
                else:
                    fp[pi] = 1
            ap[c, ti] = _ap_interpolated(tp, fp, npos)
    return EvalReport(thresholds=thresholds, class_names=class_names, per_class_ap=ap)


def write_proposals_file(path: Path, proposals: list[ActionProposal], class_names: list[str]) -> None:
    """One record per line: video_id, class_name, t_start, t_end, score."""
    lines = [
        f"{p.video_id},{class_names[p.class_id]},{p.t_start:.6f},{p.t_end:.6f},{p.score:.6f}"
        for p in proposals
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_proposals_file(path: Path, class_names: list[str]) -> list[ActionProposal]:
    index = {name: i for i, name in enumerate(class_names)}
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vid, cls_name, t_s, t_e, q = [x.strip() for x in line.split(",")]
        if cls_name not in index:
            raise ValueError(f"{path}:{lineno}: unknown class {cls_name!r}")
        out.append(ActionProposal(vid, index[cls_name], float(q), float(t_s), float(t_e)))
    return out
