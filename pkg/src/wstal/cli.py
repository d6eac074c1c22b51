"""Command-line entry points: synth, train, eval, ablate, export-diff.

Every command is deterministic given its config and seed, and every
output file embeds the config hash. Exit codes: 0 success, 1 usage or
config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .autodiff import NumericsError, TrainingError
from .config import ConfigError, RunConfig
from .data import Dataset, LoadError, SyntheticSpec, generate_synthetic, load_dataset
from .evaluation import mean_average_precision, write_proposals_file
from .refine import ConfigurationError
from .saliency import diff_values
from .training import (
    infer_video,
    load_checkpoint,
    make_partition,
    save_checkpoint,
    train,
)
from .evaluation import generate_proposals

USAGE_ERRORS = (ConfigError, ConfigurationError, LoadError, FileNotFoundError, ValueError, KeyError)
RUNTIME_ERRORS = (TrainingError, NumericsError, ArithmeticError, RuntimeError, OSError)

ABLATION_PRESETS = {
    "diff": ("diff_metric", ["random", "classification", "cosine", "l2", "l1"]),
    "modules": ("modules", ["base", "base+brm", "base+brm+dem"]),
    "fusion": ("fusion_mode", ["self", "b_only", "a_only", "add", "weighted_sum", "temporal_only"]),
    "memory": ("memory_mode", ["direct", "momentum_all", "ours"]),
}

CELL_LABELS = {
    ("diff_metric", "random"): "random",
    ("diff_metric", "classification"): "classification",
    ("diff_metric", "cosine"): "cosine distance",
    ("diff_metric", "l2"): "L2 distance",
    ("diff_metric", "l1"): "L1 distance",
    ("fusion_mode", "self"): "self",
    ("fusion_mode", "b_only"): "w/o salient",
    ("fusion_mode", "a_only"): "w/o non-salient",
    ("fusion_mode", "add"): "salient + non-salient",
    ("fusion_mode", "weighted_sum"): "weighted sum",
    ("fusion_mode", "temporal_only"): "temporal-level",
    ("memory_mode", "direct"): "direct update",
    ("memory_mode", "momentum_all"): "momentum update",
    ("memory_mode", "ours"): "ours",
}


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config.validate()


def evaluate_model(model, bank, config: RunConfig, dataset: Dataset, split: str = "test"):
    """Proposals plus mAP report for one split (falls back to all gt videos)."""
    records = dataset.split(split)
    if not any(r.gt_segments for r in records):
        records = [r for r in dataset.records if r.gt_segments]
    proposals = []
    gt_by_video = {}
    for rec in records:
        gt_by_video[rec.video_id] = list(rec.gt_segments or [])
        out = infer_video(model, bank, rec, config)
        proposals.extend(
            generate_proposals(
                rec.video_id,
                out.activation,
                out.attention,
                out.video_probs,
                rec.fps_per_snippet,
                dataset.num_classes,
                class_threshold=config.class_threshold,
                thresholds=tuple(config.proposal_thresholds),
                flank_fraction=config.flank_fraction,
                nms_iou=config.nms_iou,
            )
        )
    report = mean_average_precision(
        proposals,
        gt_by_video,
        dataset.num_classes,
        dataset.class_names,
        config.iou_thresholds,
        config.include_absent_classes,
    )
    return report, proposals


def _write_training_log(path: Path, log, config_hash: str):
    lines = [f"# config_hash={config_hash}", "epoch,loss_cls,loss_kd,loss_att_weighted,loss_total,eta"]
    for row in log:
        lines.append(
            f"{row.epoch},{row.loss_cls:.9f},{row.loss_kd:.9f},"
            f"{row.loss_att_weighted:.9f},{row.loss_total:.9f},{row.eta:.9f}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    if args.print_defaults:
        print(json.dumps(asdict(SyntheticSpec()), indent=2, default=list))
        return 0
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
        known = {f.name for f in fields(SyntheticSpec)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        for key in ("snippets_range", "segments_range"):
            if key in data:
                data[key] = tuple(data[key])
        spec = SyntheticSpec(**data)
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec = SyntheticSpec(**{**asdict(spec), "seed": args.seed})
    spec.validate()
    dataset = generate_synthetic(spec)
    from .data import write_dataset

    manifest = write_dataset(dataset, Path(args.out))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    if args.print_defaults:
        print(json.dumps(asdict(RunConfig()), indent=2))
        return 0
    config = _load_config(args)
    dataset = load_dataset(Path(args.data))
    result = train(dataset, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt, result.model, result.bank, config, dataset.class_names)
    _write_training_log(out_dir / "training_log.csv", result.log, config.config_hash())
    if result.log:
        last = result.log[-1]
        print(f"epoch {last.epoch}: loss={last.loss_total:.6f} (cls={last.loss_cls:.6f}, "
              f"kd={last.loss_kd:.6f}, att={last.loss_att_weighted:.6f})")
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    model, bank, config, class_names = load_checkpoint(Path(args.checkpoint))
    dataset = load_dataset(Path(args.data))
    if dataset.class_names != class_names:
        raise ConfigError("dataset classes do not match checkpoint classes")
    report, proposals = evaluate_model(model, bank, config, dataset, split=args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config.config_hash()
    (out_dir / "eval_report.csv").write_text(report.to_csv(cfg_hash))
    (out_dir / "eval_report.txt").write_text(report.to_text(cfg_hash))
    write_proposals_file(out_dir / "proposals.csv", proposals, class_names)
    print(report.to_text(cfg_hash), end="")
    return 0


def _run_ablation_cell(payload):
    cell_dir, dataset_path, config_dict, label = payload
    config = RunConfig.from_dict(config_dict)
    dataset = load_dataset(Path(dataset_path))
    result = train(dataset, config)
    report, proposals = evaluate_model(result.model, result.bank, config, dataset)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cell_dir / "checkpoint.ckpt", result.model, result.bank, config, dataset.class_names)
    _write_training_log(cell_dir / "training_log.csv", result.log, config.config_hash())
    (cell_dir / "eval_report.csv").write_text(report.to_csv(config.config_hash()))
    write_proposals_file(cell_dir / "proposals.csv", proposals, dataset.class_names)
    row = {
        "label": label,
        "map_per_threshold": [float(v) for v in report.map_per_threshold],
        "thresholds": list(report.thresholds),
        "averages": report.standard_averages(),
    }
    (cell_dir / "summary.json").write_text(json.dumps(row, sort_keys=True))
    return row


def _grid_cells(grid: dict[str, list], base: RunConfig):
    """Cartesian product of the grid, in declaration order."""
    cells = [({}, [])]
    for key, values in grid.items():
        cells = [
            ({**overrides, key: v}, trail + [(key, v)])
            for overrides, trail in cells
            for v in values
        ]
    out = []
    for overrides, trail in cells:
        label = "; ".join(CELL_LABELS.get((k, v), f"{k}={v}") for k, v in trail)
        out.append((base.replace(**overrides), label, overrides))
    return out


def cmd_ablate(args) -> int:
    base = _load_config(args)
    if args.preset:
        key, values = ABLATION_PRESETS[args.preset]
        grid = {key: values}
    elif args.grid:
        grid = json.loads(Path(args.grid).read_text())
        if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
            raise ConfigError("grid file must map config keys to value lists")
    else:
        raise ConfigError("ablate needs --preset or --grid")
    cells = _grid_cells(grid, base)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"{len(cells)} ablation cell(s)")

    payloads = [
        (str(out_dir / f"cell_{i:03d}"), str(args.data), asdict(config), label)
        for i, (config, label, _) in enumerate(cells)
    ]
    if args.threads > 1 and len(payloads) > 1:
        with multiprocessing.Pool(min(args.threads, len(payloads))) as pool:
            rows = pool.map(_run_ablation_cell, payloads)
    else:
        rows = [_run_ablation_cell(p) for p in payloads]

    thresholds = rows[0]["thresholds"] if rows else base.iou_thresholds
    header = ["label"] + [f"mAP@{t:g}" for t in thresholds] + list(
        rows[0]["averages"] if rows else ["AVG(0.1:0.5)", "AVG(0.3:0.7)", "AVG(0.1:0.7)"]
    )
    lines = [f"# config_hash={base.config_hash()}", ",".join(header)]
    for row in rows:
        cells_txt = [row["label"]] + [f"{v:.6f}" for v in row["map_per_threshold"]]
        cells_txt += [f"{v:.6f}" for v in row["averages"].values()]
        lines.append(",".join(cells_txt))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    print(out_dir / "summary.csv")
    return 0


def cmd_export_diff(args) -> int:
    dataset = load_dataset(Path(args.data))
    record = next((r for r in dataset.records if r.video_id == args.video), None)
    if record is None:
        raise ConfigError(f"video {args.video!r} not in dataset")
    config = _load_config(args)
    metric = config.diff_metric if config.diff_metric in ("l1", "l2", "cosine") else "l1"
    tau = diff_values(record.features, metric).tau

    scores = None
    cfg_hash = config.config_hash()
    if args.checkpoint:
        model, bank, ckpt_config, _ = load_checkpoint(Path(args.checkpoint))
        cfg_hash = ckpt_config.config_hash()
        out = infer_video(model, bank, record, ckpt_config)
        scores = out.activation[:, : dataset.num_classes].max(axis=1)

    gt_flags = np.zeros(record.num_snippets, dtype=int)
    for _, start, end in record.gt_segments or ():
        lo = int(round(start / record.fps_per_snippet))
        hi = int(round(end / record.fps_per_snippet))
        gt_flags[lo:hi] = 1

    lines = [f"# config_hash={cfg_hash}", "pair_index,tau,snippet_index,action_score,gt_flag"]
    for t in range(record.num_snippets):
        pair = f"{t},{tau[t]:.9f}" if t < record.num_snippets - 1 else ","
        score = f"{scores[t]:.9f}" if scores is not None else ""
        lines.append(f"{pair},{t},{score},{gt_flags[t]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wstal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", help="JSON synthetic-spec file")
    p_synth.add_argument("--out", required="--print-defaults" not in sys.argv, help="output directory")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--print-defaults", action="store_true")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.add_argument("--data", required="--print-defaults" not in sys.argv, help="dataset manifest")
    p_train.add_argument("--out", required="--print-defaults" not in sys.argv, help="output directory")
    p_train.add_argument("--print-defaults", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset manifest")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--split", default="test")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run an ablation grid")
    common(p_abl)
    p_abl.add_argument("--data", required=True, help="dataset manifest")
    p_abl.add_argument("--out", required=True, help="output directory")
    p_abl.add_argument("--grid", help="JSON file: config key -> list of values")
    p_abl.add_argument("--preset", choices=sorted(ABLATION_PRESETS))
    p_abl.add_argument("--threads", type=int, default=1)
    p_abl.set_defaults(func=cmd_ablate)

    p_diff = sub.add_parser("export-diff", help="dump per-pair differences and scores")
    common(p_diff)
    p_diff.add_argument("--data", required=True, help="dataset manifest")
    p_diff.add_argument("--video", required=True, help="video id")
    p_diff.add_argument("--checkpoint", help="optional checkpoint for action scores")
    p_diff.add_argument("--out", help="output CSV (stdout when omitted)")
    p_diff.set_defaults(func=cmd_export_diff)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
