"""Command-line entry point: dataset synthesis/ingestion, training,
evaluation, the experiment matrix, ablations, and report emission, all
driven by a flat INI config file.

Every command writes a resolved config snapshot and a run manifest into its
output directory; reruns either reuse persisted results or refuse to clobber.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    config_hash,
    dump_config_ini,
    load_config,
    run_config_hash,
)
from .data import DatasetError, load_dataset, write_dataset
from .evaluate import (
    ResultRecord,
    enumerate_matrix,
    evaluate,
    make_result_record,
    run_matrix,
    run_single,
    write_aggregate_csv,
    write_curve_csv,
    write_results_csv,
)
from .ingest import IngestError, convert_directory
from .model import load_checkpoint
from .synth import build_dataset

DATA_ROOT_ENV = "MGENSEG_DATA_ROOT"


def resolve_path(path_str):
    """Explicit absolute paths win; relative paths honor the data-root env var."""
    p = Path(path_str)
    if p.is_absolute() or p.exists():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        return Path(root) / p
    return p


def write_run_manifest(out_dir, command, args, cfg=None, started=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(getattr(args, "config", "") or ""),
        "config_hash": config_hash(cfg) if cfg is not None else "",
        "out_dir": str(out_dir),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "version": __version__,
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if cfg is not None:
        (out_dir / "config.snapshot.ini").write_text(dump_config_ini(cfg))


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _load_dataset_checked(args, cfg):
    manifest = load_dataset(resolve_path(args.data))
    if manifest.source_hash and manifest.source_hash != config_hash(cfg.synth):
        raise ConfigError(
            f"dataset at {args.data} was built from a different [synth] config "
            f"({manifest.source_hash} != {config_hash(cfg.synth)})"
        )
    return manifest


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args):
    started = _now()
    cfg = load_config(args.config, require=("synth",))
    manifest = build_dataset(cfg.synth)
    out = resolve_path(args.out)
    write_dataset(manifest, out, force=args.force)
    write_run_manifest(out, "synth", args, cfg, started)
    counts = manifest.counts()
    print(f"MGENSEG synth wrote {len(manifest.samples)} samples to {out}")
    for key in sorted(counts):
        print(f"MGENSEG   {key}: {counts[key]}")
    return 0


def cmd_ingest(args):
    started = _now()
    cfg = load_config(args.config, require=())
    manifest = convert_directory(resolve_path(args.input), cfg.ingest)
    out = resolve_path(args.out)
    write_dataset(manifest, out, force=args.force)
    write_run_manifest(out, "ingest", args, cfg, started)
    print(f"MGENSEG ingest wrote {len(manifest.samples)} samples to {out}")
    return 0


def _experiment_from_args(cfg, args):
    experiment = cfg.experiment
    if getattr(args, "ablation", None):
        experiment = replace(experiment, ablation=args.ablation)
    return experiment


def cmd_train(args):
    started = _now()
    cfg = load_config(args.config, require=("synth", "training"))
    if args.seeds:
        cfg = replace(cfg, training=replace(cfg.training, seeds=tuple(args.seeds)))
    experiment = _experiment_from_args(cfg, args)
    manifest = _load_dataset_checked(args, cfg)
    out = resolve_path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_seed = {}
    for seed in cfg.training.seeds:
        run_dir = out / f"seed{seed}"
        busy = (run_dir / "state.pt").exists() or (run_dir / "result.json").exists()
        if busy and not (args.resume or args.force):
            raise ConfigError(f"{run_dir} already holds a run; pass --resume or --force")
        if args.force and run_dir.exists():
            import shutil

            shutil.rmtree(run_dir)
        per_seed[seed] = run_single(
            manifest, cfg, experiment, seed, run_dir, quiet=args.quiet, resume=args.resume
        )
    record = make_result_record(cfg, experiment, per_seed)
    write_results_csv([record], out / "results.csv")
    write_aggregate_csv([record], out / "aggregate.csv")
    write_run_manifest(out, "train", args, cfg, started)
    print(f"MGENSEG train mean_target_dice={record.mean:.4f} std={record.std:.4f}")
    return 0


def cmd_eval(args):
    started = _now()
    cfg = load_config(args.config, require=("synth",))
    if args.partition == "train" and not args.allow_train:
        raise ConfigError("refusing to evaluate on the training partition without --allow-train")
    manifest = _load_dataset_checked(args, cfg)
    checkpoint = resolve_path(args.checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"missing checkpoint {checkpoint}")
    model, meta = load_checkpoint(checkpoint)
    experiment = _experiment_from_args(cfg, args)
    result = evaluate(
        model,
        manifest,
        experiment.target,
        partition=args.partition,
        threshold=experiment.eval_threshold,
    )
    out = resolve_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "eval.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("slice", "dice"))
        writer.writeheader()
        for i, score in enumerate(result.per_slice):
            writer.writerow({"slice": i, "dice": score})
    (out / "eval.json").write_text(
        json.dumps(
            {
                "partition": args.partition,
                "modality": experiment.target,
                "mean_dice": result.mean_dice,
                "std_dice": result.std_dice,
                "n_slices": result.n_slices,
                "healthy_fp_fraction": result.healthy_fp_fraction,
                "checkpoint_epoch": meta.get("epoch"),
                "checkpoint_val_dice": meta.get("val_dice"),
            },
            indent=2,
        )
        + "\n"
    )
    write_run_manifest(out, "eval", args, cfg, started)
    print(f"MGENSEG eval mean_dice={result.mean_dice:.4f} over {result.n_slices} slices")
    return 0


def cmd_matrix(args):
    started = _now()
    cfg = load_config(args.config, require=("synth", "training"))
    if args.seeds:
        cfg = replace(cfg, training=replace(cfg.training, seeds=tuple(args.seeds)))
    manifest = _load_dataset_checked(args, cfg)
    experiments = enumerate_matrix(cfg)
    out = resolve_path(args.out)
    records = run_matrix(
        manifest,
        cfg,
        experiments,
        out,
        jobs=args.jobs,
        quiet=args.quiet,
        dataset_dir=resolve_path(args.data),
    )
    write_curve_csv(records, out / "dice_vs_fraction.csv")
    write_run_manifest(out, "matrix", args, cfg, started)
    for r in records:
        label = "baseline" if r.baseline else r.ablation
        print(
            f"MGENSEG matrix {r.source}->{r.target} frac={r.source_fraction} "
            f"{label}: {r.mean:.4f} +/- {r.std:.4f}"
        )
    return 0


def cmd_ablate(args):
    if not args.ablation or args.ablation == "none":
        raise ConfigError("ablate requires --ablation with a non-trivial tag")
    return cmd_train(args)


def cmd_report(args):
    started = _now()
    out = resolve_path(args.out)
    results_path = out / "results.csv"
    if not results_path.exists():
        raise ConfigError(f"no results.csv under {out}; run matrix or train first")
    records = _records_from_csv(results_path)
    write_aggregate_csv(records, out / "aggregate.csv")
    write_curve_csv(records, out / "dice_vs_fraction.csv")
    figures = sorted(str(p.relative_to(out)) for p in out.rglob("*.png"))
    (out / "report.json").write_text(
        json.dumps(
            {
                "n_configs": len(records),
                "n_rows": sum(len(r.per_seed) for r in records),
                "figures": figures,
            },
            indent=2,
        )
        + "\n"
    )
    write_run_manifest(out, "report", args, None, started)
    print(f"MGENSEG report aggregated {len(records)} configs, {len(figures)} figures")
    return 0


def _records_from_csv(path):
    groups = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            key = row["config_hash"]
            groups.setdefault(key, []).append(row)
    records = []
    for key, rows in sorted(groups.items()):
        first = rows[0]
        per_seed = {int(r["seed"]): float(r["dice"]) for r in rows}
        values = list(per_seed.values())
        import numpy as np

        records.append(
            ResultRecord(
                config_hash=key,
                source=first["source"],
                target=first["target"],
                source_fraction=float(first["src_frac"]),
                target_fraction=float(first["tgt_frac"]),
                ablation=first["ablation"] if first["ablation"] != "baseline" else "none",
                baseline=first["ablation"] == "baseline",
                per_seed=per_seed,
                mean=float(np.mean(values)),
                std=float(np.std(values)),
            )
        )
    return records


# --------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mgenseg",
        description="Cross-modality tumor segmentation with translation-based "
        "semi-supervision: dataset synthesis, training, evaluation, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="flat INI config file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--quiet", action="store_true")

    p_synth = sub.add_parser("synth", help="generate the synthetic bi-modal dataset")
    add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_ingest = sub.add_parser("ingest", help="convert a 3D volume directory to a slice dataset")
    add_common(p_ingest)
    p_ingest.add_argument("--input", required=True, help="directory of per-subject volumes")
    p_ingest.set_defaults(func=cmd_ingest)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} a model per configured seed")
        add_common(p)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--seeds", type=int, nargs="+", help="override configured seeds")
        p.add_argument("--resume", action="store_true", help="resume interrupted runs")
        p.add_argument("--ablation", help="ablation tag to apply")
        p.set_defaults(func=func)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one partition")
    add_common(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--partition", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--allow-train", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_matrix = sub.add_parser("matrix", help="run the configured experiment matrix")
    add_common(p_matrix)
    p_matrix.add_argument("--data", required=True)
    p_matrix.add_argument("--seeds", type=int, nargs="+")
    p_matrix.add_argument("--jobs", type=int, default=1, help="parallel runs (process isolation)")
    p_matrix.set_defaults(func=cmd_matrix)

    p_report = sub.add_parser("report", help="aggregate persisted CSVs; no model load")
    add_common(p_report, config=False)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, IngestError, ValueError, OSError) as exc:
        print(f"mgenseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
