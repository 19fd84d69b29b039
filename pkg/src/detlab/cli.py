"""Command-line surface: dataset generation, training, evaluation, paired
mode comparison across seeds, and hyperparameter sweeps.

Every command is deterministic given (flags, config file, seed) and writes
a manifest with the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    EvalConfig,
    RunConfig,
    format_config,
    parse_config,
    with_seed,
    write_manifest,
)
from .detsim import (
    GenerationError,
    SyntheticDataset,
    generate_dataset,
    load_dataset,
    sample_kshot,
    save_dataset,
)
from .evaluate import (
    APReport,
    DistanceReport,
    distance_report,
    evaluate_model,
    write_ap_report_csv,
    write_distance_report_csv,
)
from .model import DetectionModel, load_checkpoint, save_checkpoint
from .numeric import NumericError
from .resemblance import (
    ResemblanceGroup,
    materialize_group,
    replication_histogram,
    write_histogram_csv,
)
from .trainer import (
    MODE_FSRC,
    MODE_GCL,
    MODE_NONE,
    DivergenceError,
    TrainState,
    run_base_pretrain,
    run_finetune,
    write_loss_csv,
)

logger = logging.getLogger(__name__)

GROUP_FORMAT = "detlab-group"
GROUP_VERSION = 1

OUT_ROOT_ENV = "DETLAB_OUT_ROOT"

# Sweep grids mirror the three hyperparameter rows of the ablation table;
# the non-swept axes stay at milestone=0.75, iou=0.5, rep=0.
SWEEP_MILESTONES = [0.05, 0.25, 0.5, 0.75, 1.0]
SWEEP_IOU_THRESHOLDS = [0.0, 0.25, 0.5, 0.75, 0.9]
SWEEP_REP_THRESHOLDS = [0, 5, 10, 20]

COMPARE_METRICS = [
    "novel_map50",
    "all_map50",
    "std_novel",
    "std_all",
    "dist_within",
    "dist_outside",
]


class CommandError(RuntimeError):
    """User-facing command failure; message printed, exit nonzero."""


def _resolve_out(arg: str | None, command: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise CommandError(
        f"--out is required (or set {OUT_ROOT_ENV} for a default output root)"
    )


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(path)


def write_group_json(
    group: ResemblanceGroup, materialized_during_training: bool, path: Path
) -> None:
    payload = {
        "format": GROUP_FORMAT,
        "version": GROUP_VERSION,
        "classes": sorted(group.classes),
        "materialized_during_training": materialized_during_training,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_group_json(path: str | Path) -> ResemblanceGroup:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != GROUP_FORMAT:
        raise CommandError(f"{path} is not a {GROUP_FORMAT} file")
    return ResemblanceGroup(frozenset(payload["classes"]))


def train_pipeline(
    config: RunConfig,
    dataset: SyntheticDataset,
    mode: str,
    out_dir: Path | None = None,
    base_checkpoint: str | None = None,
    base_model: DetectionModel | None = None,
) -> tuple[DetectionModel, TrainState, ResemblanceGroup, DetectionModel]:
    """Base pre-training (or checkpoint reuse) followed by K-shot fine-tuning.

    Returns (final model, train state, reporting group, base model). The
    reporting group is the state's frozen group when one was materialized
    during training, otherwise a post-hoc materialization of the counter.
    """
    catalog = dataset.catalog()
    train_cfg = replace(config.train, contrastive_mode=mode)
    if base_model is not None:
        model = base_model.copy()
    elif base_checkpoint is not None:
        model = load_checkpoint(base_checkpoint)
        if model.input_dim != dataset.config.embed_dim:
            raise CommandError(
                f"checkpoint input dim {model.input_dim} does not match "
                f"dataset embed dim {dataset.config.embed_dim}"
            )
    else:
        model = DetectionModel(
            input_dim=dataset.config.embed_dim,
            num_classes=dataset.config.num_classes,
            hidden_dim=train_cfg.hidden_dim,
            con_dim=train_cfg.con_dim,
            rng=np.random.default_rng([train_cfg.seed, 7]),
        )
        pretrain_cfg = replace(
            train_cfg,
            total_iterations=config.pretrain_iterations,
            contrastive_mode=MODE_NONE,
        )
        pretrain_history = run_base_pretrain(
            model, dataset.splits["base_train"], pretrain_cfg, catalog
        )
        if out_dir is not None:
            write_loss_csv(pretrain_history, out_dir / "pretrain_loss.csv")
    base = model.copy()
    if out_dir is not None:
        save_checkpoint(base, out_dir / "checkpoint_base.json")

    kshot_rng = np.random.default_rng([train_cfg.seed, 8])
    shots = sample_kshot(dataset.splits["pool"], train_cfg.kshot, catalog, kshot_rng)
    state = run_finetune(model, shots, train_cfg, catalog)

    if state.group is not None:
        report_group = state.group
        materialized = True
    else:
        report_group = materialize_group(
            state.pair_counter, train_cfg.rep_threshold, catalog
        )
        materialized = False

    if out_dir is not None:
        write_loss_csv(state.loss_history, out_dir / "loss_history.csv")
        write_histogram_csv(
            replication_histogram(state.pair_counter, catalog),
            out_dir / "histogram.csv",
        )
        write_group_json(report_group, materialized, out_dir / "group.json")
        save_checkpoint(model, out_dir / "checkpoint_final.json")
    return model, state, report_group, base


def _eval_reports(
    model: DetectionModel,
    dataset: SyntheticDataset,
    eval_cfg: EvalConfig,
    group: ResemblanceGroup | None,
) -> tuple[APReport, DistanceReport]:
    catalog = dataset.catalog()
    test = dataset.splits["test"]
    ap = evaluate_model(
        model,
        test,
        catalog,
        score_threshold=eval_cfg.score_threshold,
        nms_iou=eval_cfg.nms_iou,
    )
    dist = distance_report(model, test, catalog, group)
    return ap, dist


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    out = Path(args.out) if args.out else _resolve_out(None, "gen-data") / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config.dataset)
    save_dataset(dataset, out)
    write_manifest(
        out.with_suffix(".manifest.json"),
        "gen-data",
        config,
        artifacts={"dataset": str(out)},
    )
    print(f"wrote {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = with_seed(_load_config(args.config), args.seed)
    dataset = load_dataset(args.dataset)
    out_dir = _resolve_out(args.out, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = args.mode or config.train.contrastive_mode
    model, state, group, _ = train_pipeline(
        config, dataset, mode, out_dir=out_dir, base_checkpoint=args.base_checkpoint
    )
    artifacts = {
        "loss_history": str(out_dir / "loss_history.csv"),
        "histogram": str(out_dir / "histogram.csv"),
        "group": str(out_dir / "group.json"),
        "checkpoint_base": str(out_dir / "checkpoint_base.json"),
        "checkpoint_final": str(out_dir / "checkpoint_final.json"),
    }
    write_manifest(
        out_dir / "manifest.json",
        "train",
        replace(config, train=replace(config.train, contrastive_mode=mode)),
        artifacts=artifacts,
        extra={"dataset_path": str(args.dataset), "group_size": len(group)},
    )
    print(f"trained ({mode}) -> {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if not Path(args.checkpoint).exists():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if model.input_dim != dataset.config.embed_dim or (
        model.num_classes != dataset.config.num_classes
    ):
        raise CommandError(
            "checkpoint/dataset shape mismatch: model expects "
            f"(d={model.input_dim}, C={model.num_classes}), dataset has "
            f"(d={dataset.config.embed_dim}, C={dataset.config.num_classes})"
        )
    group = load_group_json(args.group) if args.group else None
    out_dir = _resolve_out(args.out, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    ap, dist = _eval_reports(model, dataset, config.eval, group)
    catalog = dataset.catalog()
    write_ap_report_csv(ap, catalog, out_dir / "ap_report.csv")
    write_distance_report_csv(dist, out_dir / "distance_report.csv")
    summary = {
        "map50_base": ap.map50_base,
        "map50_novel": ap.map50_novel,
        "map50_all": ap.map50_all,
        "std_novel": ap.std_novel,
        "std_all": ap.std_all,
        "mean_within_group": dist.mean_within_group,
        "mean_outside_group": dist.mean_outside_group,
        "per_class_ap50": {str(k): v for k, v in sorted(ap.per_class_ap50.items())},
    }
    with open(out_dir / "eval_summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_manifest(
        out_dir / "manifest.json",
        "eval",
        config,
        artifacts={
            "ap_report": str(out_dir / "ap_report.csv"),
            "distance_report": str(out_dir / "distance_report.csv"),
            "summary": str(out_dir / "eval_summary.json"),
        },
        extra={"checkpoint": str(args.checkpoint), "dataset_path": str(args.dataset)},
    )
    print(f"map50_all={ap.map50_all:.4f} map50_novel={ap.map50_novel:.4f} -> {out_dir}")
    return 0


def _seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise CommandError(f"bad --seeds value {raw!r}: {exc}") from exc
    if len(seeds) < 2:
        raise CommandError("compare needs at least 2 seeds")
    return seeds


def run_paired_comparison(
    config: RunConfig, seeds: list[int], out_dir: Path
) -> dict:
    """Train GCL-only and FSRC on identical data per seed; tabulate deltas.

    Each seed derives its own world (dataset seed offset by the run seed)
    and shares one base pre-training between the two arms.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    per_class_rows: list[dict] = []
    for seed in seeds:
        seeded = replace(
            config,
            dataset=replace(config.dataset, seed=config.dataset.seed + seed),
            train=replace(config.train, seed=seed),
        )
        dataset = generate_dataset(seeded.dataset)
        catalog = dataset.catalog()
        arm_results: dict[str, tuple[APReport, DistanceReport]] = {}
        base_model: DetectionModel | None = None
        for arm in (MODE_GCL, MODE_FSRC):
            arm_dir = out_dir / f"seed{seed}" / arm
            arm_dir.mkdir(parents=True, exist_ok=True)
            model, state, group, base_model = train_pipeline(
                seeded, dataset, arm, out_dir=arm_dir, base_model=base_model
            )
            arm_results[arm] = _eval_reports(model, dataset, seeded.eval, group)
        row: dict = {"seed": seed}
        for metric in COMPARE_METRICS:
            for arm in (MODE_GCL, MODE_FSRC):
                ap, dist = arm_results[arm]
                value = {
                    "novel_map50": ap.map50_novel,
                    "all_map50": ap.map50_all,
                    "std_novel": ap.std_novel,
                    "std_all": ap.std_all,
                    "dist_within": dist.mean_within_group,
                    "dist_outside": dist.mean_outside_group,
                }[metric]
                row[f"{metric}_{arm}"] = value
            row[f"{metric}_delta"] = row[f"{metric}_{MODE_FSRC}"] - row[f"{metric}_{MODE_GCL}"]
        rows.append(row)
        gcl_ap = arm_results[MODE_GCL][0].per_class_ap50
        fsrc_ap = arm_results[MODE_FSRC][0].per_class_ap50
        for cid in sorted(set(gcl_ap) | set(fsrc_ap)):
            per_class_rows.append(
                {
                    "seed": seed,
                    "class_id": cid,
                    "split": "novel" if catalog.is_novel(cid) else "base",
                    "ap50_gcl": gcl_ap.get(cid, float("nan")),
                    "ap50_fsrc": fsrc_ap.get(cid, float("nan")),
                    "ap50_delta": fsrc_ap.get(cid, float("nan")) - gcl_ap.get(cid, float("nan")),
                }
            )

    columns = ["seed"]
    for metric in COMPARE_METRICS:
        columns += [f"{metric}_{MODE_GCL}", f"{metric}_{MODE_FSRC}", f"{metric}_delta"]
    mean_row: dict = {"seed": "mean"}
    sign_row: dict = {"seed": "sign(neg|zero|pos)"}
    for col in columns[1:]:
        values = [row[col] for row in rows]
        mean_row[col] = sum(values) / len(values)
        if col.endswith("_delta"):
            neg = sum(1 for v in values if v < 0)
            zero = sum(1 for v in values if v == 0)
            pos = sum(1 for v in values if v > 0)
            sign_row[col] = f"{neg}|{zero}|{pos}"
        else:
            sign_row[col] = ""

    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        writer.writerow(mean_row)
        writer.writerow(sign_row)
    with open(out_dir / "compare_per_class.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["seed", "class_id", "split", "ap50_gcl", "ap50_fsrc", "ap50_delta"],
        )
        writer.writeheader()
        for row in per_class_rows:
            writer.writerow(row)
    return {"rows": rows, "mean": mean_row, "sign": sign_row}


def cmd_compare(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    seeds = _seed_list(args.seeds)
    out_dir = _resolve_out(args.out, "compare")
    summary = run_paired_comparison(config, seeds, out_dir)
    write_manifest(
        out_dir / "manifest.json",
        "compare",
        config,
        artifacts={
            "compare": str(out_dir / "compare.csv"),
            "per_class": str(out_dir / "compare_per_class.csv"),
        },
        extra={"seeds": seeds},
    )
    mean = summary["mean"]
    print(
        f"compared {len(seeds)} seeds: mean std_novel delta "
        f"{mean['std_novel_delta']:+.4f}, mean within-group distance delta "
        f"{mean['dist_within_delta']:+.4f} -> {out_dir}"
    )
    return 0


def run_sweeps(config: RunConfig, out_dir: Path) -> list[dict]:
    """Three 1-D hyperparameter sweeps sharing one dataset and pre-training."""
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config.dataset)
    base_cfg = replace(
        config.train,
        milestone=0.75,
        group_iou_threshold=0.5,
        rep_threshold=0,
        contrastive_mode=MODE_FSRC,
    )
    base_model: DetectionModel | None = None
    rows: list[dict] = []

    def run_point(section: str, train_cfg) -> None:
        nonlocal base_model
        point_cfg = replace(config, train=train_cfg)
        model, _, group, base_model = train_pipeline(
            point_cfg, dataset, MODE_FSRC, out_dir=None, base_model=base_model
        )
        ap, _ = _eval_reports(model, dataset, config.eval, group)
        rows.append(
            {
                "section": section,
                "milestone": train_cfg.milestone,
                "group_iou_threshold": train_cfg.group_iou_threshold,
                "rep_threshold": train_cfg.rep_threshold,
                "novel_map50": ap.map50_novel,
                "all_map50": ap.map50_all,
                "std_novel": ap.std_novel,
                "std_all": ap.std_all,
            }
        )

    for milestone in SWEEP_MILESTONES:
        run_point("milestone", replace(base_cfg, milestone=milestone))
    for th in SWEEP_IOU_THRESHOLDS:
        run_point("group_iou_threshold", replace(base_cfg, group_iou_threshold=th))
    for rep in SWEEP_REP_THRESHOLDS:
        run_point("rep_threshold", replace(base_cfg, rep_threshold=rep))

    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "section",
                "milestone",
                "group_iou_threshold",
                "rep_threshold",
                "novel_map50",
                "all_map50",
                "std_novel",
                "std_all",
            ],
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


def cmd_sweep(args: argparse.Namespace) -> int:
    config = with_seed(_load_config(args.config), args.seed)
    out_dir = _resolve_out(args.out, "sweep")
    rows = run_sweeps(config, out_dir)
    write_manifest(
        out_dir / "manifest.json",
        "sweep",
        config,
        artifacts={"sweep": str(out_dir / "sweep.csv")},
        extra={"points": len(rows)},
    )
    print(f"swept {len(rows)} points -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detlab",
        description="Synthetic few-shot detection laboratory",
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the full default configuration as INI and exit",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output dataset path (.jsonl)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="base pre-train then K-shot fine-tune")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--dataset", required=True, help="dataset .jsonl path")
    p.add_argument("--mode", choices=[MODE_NONE, MODE_GCL, MODE_FSRC])
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--base-checkpoint", help="reuse an existing base checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--group", help="optional group.json for the distance split")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired GCL-vs-FSRC runs across seeds")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="milestone/IoU/replication 1-D sweeps")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        sys.stdout.write(format_config())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (
        CommandError,
        ConfigError,
        GenerationError,
        DivergenceError,
        NumericError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
