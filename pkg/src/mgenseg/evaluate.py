"""Evaluation protocol: test-time Dice, the experiment matrix with its
3-seed mean/std aggregation, ablation wiring, the no-adaptation baseline,
and CSV/figure emission.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import (
    ABLATIONS,
    Config,
    ConfigError,
    ExperimentConfig,
    dump_config_ini,
    run_config_hash,
)
from .data import mask_annotations
from .model import build_baseline, load_checkpoint
from .training import (
    AccessLog,
    BatchBuilder,
    FitResult,
    _to_tensor,
    augment,
    dice_over_samples,
    fit,
    hard_dice,
    predict_probabilities,
)
from .losses import dice_loss
from .synth import _mix_seed

RESULTS_CSV_COLUMNS = ("config_hash", "source", "target", "src_frac", "tgt_frac", "ablation", "seed", "dice")


# --------------------------------------------------------------------------
# Test-time Dice


@dataclass
class EvalResult:
    mean_dice: float
    std_dice: float
    per_slice: list
    n_slices: int
    healthy_fp_fraction: float  # mean predicted-positive area on healthy slices


def evaluate(model, manifest, modality, partition="test", threshold=0.5, bundle_modality=None,
             access_log=None):
    """Per-slice hard Dice over the diseased slices of one partition.

    bundle_modality selects which network branch processes the images (the
    no-adaptation baseline applies the source branch to target images).
    False-positive area on healthy slices is reported separately since Dice
    is undefined there.
    """
    bundle_modality = bundle_modality or modality
    diseased = manifest.partition(partition, modality=modality, domain="P")
    if not diseased:
        raise ValueError(f"no diseased {modality} slices in partition {partition!r}")
    scores = dice_over_samples(
        model, diseased, bundle_modality, threshold=threshold, access_log=access_log
    )
    healthy = manifest.partition(partition, modality=modality, domain="A")
    fp = 0.0
    if healthy:
        probs = predict_probabilities(model, healthy, bundle_modality)
        fp = float(np.mean([(p >= threshold).mean() for p in probs]))
    return EvalResult(
        mean_dice=float(np.mean(scores)),
        std_dice=float(np.std(scores)),
        per_slice=[float(s) for s in scores],
        n_slices=len(scores),
        healthy_fp_fraction=fp,
    )


# --------------------------------------------------------------------------
# Ablations


def apply_ablation(cfg: Config) -> Config:
    """Adjust loss weights / wiring flags for the configured ablation."""
    tag = cfg.experiment.ablation
    if tag not in ABLATIONS:
        raise ConfigError(f"unknown ablation {tag!r}")
    if tag == "no_image_level":
        return replace(cfg, losses=replace(cfg.losses, adv_gen=0.0, rec_gen=0.0, lat_gen=0.0))
    # the remaining tags are wiring changes read from experiment.ablation at
    # train/model-build time; the config itself is already complete
    return cfg


# --------------------------------------------------------------------------
# No-adaptation baseline


def fit_baseline(manifest, cfg: Config, experiment: ExperimentConfig, seed, run_dir, quiet=False):
    """Supervised segmentation on annotated source slices only; best epoch
    selected on source validation Dice. Never reads target images."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    access_log = AccessLog()
    src = experiment.source
    train_pool = [
        s for s in manifest.partition("train", modality=src, domain="P") if s.annotated
    ]
    if not train_pool:
        raise ValueError("baseline requires at least one annotated source subject")
    val_pool = manifest.partition("val", modality=src, domain="P")

    model = build_baseline(
        cfg.model, seed=int(np.random.default_rng(_mix_seed(seed, 0xBA5E)).integers(0, 2**62))
    )
    opt = torch.optim.Adam(
        model.parameters(),
        lr=cfg.training.learning_rate,
        betas=(cfg.training.beta1, cfg.training.beta2),
        amsgrad=True,
    )
    batch = cfg.training.batch_size
    steps = max(1, math.ceil(len(train_pool) / batch))
    best_val, best_epoch = -1.0, -1
    best_path = run_dir / "baseline_best.pt"
    metrics_path = run_dir / "metrics.jsonl"

    with metrics_path.open("w") as log:
        for epoch in range(cfg.training.epochs):
            rng = np.random.default_rng(_mix_seed(seed, 0xB1, epoch))
            order = np.resize(rng.permutation(len(train_pool)), steps * batch)
            aug_seeds = rng.integers(0, 2**31 - 1, size=steps * batch)
            for step in range(steps):
                idxs = order[step * batch : (step + 1) * batch]
                samples = [train_pool[i] for i in idxs]
                access_log.record(src, "train", "fit")
                if cfg.training.augment:
                    samples = [
                        augment(
                            s,
                            int(aug_seeds[step * batch + j]),
                            flip=cfg.training.augment_flip,
                            rotate=cfg.training.augment_rotate,
                            intensity=cfg.training.augment_intensity,
                        )
                        for j, s in enumerate(samples)
                    ]
                x = _to_tensor([s.image for s in samples])
                y = _to_tensor([s.mask.astype(np.float32) for s in samples])
                loss = dice_loss(y, model.segment(x))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            val_scores = dice_over_samples(
                model, val_pool, src, threshold=experiment.eval_threshold,
                access_log=access_log, phase="fit_val",
            )
            val_dice = float(np.mean(val_scores))
            log.write(json.dumps({"kind": "epoch", "epoch": epoch, "val_dice_source": val_dice}) + "\n")
            if not quiet:
                print(f"MGENSEG baseline epoch={epoch + 1}/{cfg.training.epochs} "
                      f"val_dice_source={val_dice:.4f}", flush=True)
            if val_dice > best_val:
                best_val, best_epoch = val_dice, epoch
                torch.save({"model": model.state_dict(), "epoch": epoch, "val_dice": val_dice},
                           best_path)

    assert not any(m == experiment.target for m in access_log.modalities_read()), \
        "baseline touched target images during training"
    model.load_state_dict(torch.load(best_path, weights_only=False)["model"])
    return model, FitResult(
        run_dir=run_dir,
        best_epoch=best_epoch,
        best_val_dice=best_val,
        metrics_path=metrics_path,
        best_checkpoint=best_path,
        state_path=best_path,
        access_log=access_log,
        epochs_run=cfg.training.epochs,
    )


def baseline_no_adaptation(manifest, cfg: Config, experiment: ExperimentConfig, out_dir,
                           seeds=None, quiet=False):
    """Train/evaluate the source-supervised reference over the seed protocol."""
    seeds = list(seeds if seeds is not None else cfg.training.seeds)
    exp = replace(experiment, baseline=True, ablation="none")
    masked = apply_annotation_fractions(manifest, cfg, exp)
    per_seed = {}
    for seed in seeds:
        run_dir = Path(out_dir) / f"seed{seed}"
        model, _ = fit_baseline(masked, cfg, exp, seed, run_dir, quiet=quiet)
        result = evaluate(
            model, masked, exp.target, partition="test",
            threshold=exp.eval_threshold, bundle_modality=exp.source,
        )
        per_seed[seed] = result.mean_dice
        (run_dir / "result.json").write_text(json.dumps({"seed": seed, "dice": result.mean_dice}))
    return make_result_record(cfg, exp, per_seed)


# --------------------------------------------------------------------------
# Experiment matrix


@dataclass
class ResultRecord:
    config_hash: str
    source: str
    target: str
    source_fraction: float
    target_fraction: float
    ablation: str
    baseline: bool
    per_seed: dict
    mean: float
    std: float

    def csv_rows(self):
        label = "baseline" if self.baseline else self.ablation
        for seed in sorted(self.per_seed):
            yield {
                "config_hash": self.config_hash,
                "source": self.source,
                "target": self.target,
                "src_frac": self.source_fraction,
                "tgt_frac": self.target_fraction,
                "ablation": label,
                "seed": seed,
                "dice": self.per_seed[seed],
            }


def make_result_record(cfg, experiment, per_seed):
    values = [per_seed[s] for s in sorted(per_seed)]
    return ResultRecord(
        config_hash=run_config_hash(apply_ablation(replace(cfg, experiment=experiment)), experiment),
        source=experiment.source,
        target=experiment.target,
        source_fraction=experiment.source_annotation_fraction,
        target_fraction=experiment.target_annotation_fraction,
        ablation=experiment.ablation,
        baseline=experiment.baseline,
        per_seed=dict(per_seed),
        mean=float(np.mean(values)),
        std=float(np.std(values)),
    )


def apply_annotation_fractions(manifest, cfg, experiment):
    """Hide annotations down to the experiment's per-modality fractions.

    Selection depends on the dataset seed, not the training seed, so all
    training repetitions see the same annotated subjects.
    """
    masked = mask_annotations(
        manifest, experiment.source_annotation_fraction, cfg.synth.seed, experiment.source
    )
    masked = mask_annotations(
        masked, experiment.target_annotation_fraction, cfg.synth.seed, experiment.target
    )
    return masked


def run_single(manifest, cfg, experiment, seed, run_dir, quiet=False, resume=True, figures=True):
    """One (config, seed) training + target-test evaluation, persisted under
    run_dir. Returns the test Dice. Skips work already on disk."""
    run_dir = Path(run_dir)
    result_path = run_dir / "result.json"
    if resume and result_path.exists():
        return json.loads(result_path.read_text())["dice"]
    effective = apply_ablation(replace(cfg, experiment=experiment))
    masked = apply_annotation_fractions(manifest, effective, experiment)
    if experiment.baseline:
        model, _ = fit_baseline(masked, effective, experiment, seed, run_dir, quiet=quiet)
        result = evaluate(model, masked, experiment.target, partition="test",
                          threshold=experiment.eval_threshold, bundle_modality=experiment.source)
    else:
        fit_result = fit(masked, effective, experiment, seed, run_dir, resume=resume, quiet=quiet)
        model, _meta = load_checkpoint(fit_result.best_checkpoint)
        result = evaluate(model, masked, experiment.target, partition="test",
                          threshold=experiment.eval_threshold)
        if figures:
            try:
                generate_figures(model, masked, experiment, run_dir / "figures")
            except Exception as exc:  # figures are best-effort
                print(f"MGENSEG figure emission failed: {exc}", flush=True)
    result_path.write_text(json.dumps({
        "seed": seed,
        "dice": result.mean_dice,
        "per_slice_std": result.std_dice,
        "n_slices": result.n_slices,
        "healthy_fp_fraction": result.healthy_fp_fraction,
    }))
    return result.mean_dice


def _matrix_worker(args):
    dataset_dir, cfg, experiment, seed, run_dir, quiet = args
    from .data import load_dataset

    manifest = load_dataset(dataset_dir)
    return run_single(manifest, cfg, experiment, seed, run_dir, quiet=quiet)


def run_matrix(manifest, cfg: Config, experiments, out_dir, seeds=None, jobs=1, quiet=False,
               dataset_dir=None, figures=True):
    """Run every experiment over the seed protocol; persist per-run results
    incrementally so a rerun skips completed entries; aggregate mean/std."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else cfg.training.seeds)

    jobs_args = []
    planned = []
    for experiment in experiments:
        experiment.validate()
        effective = apply_ablation(replace(cfg, experiment=experiment))
        cfg_hash = run_config_hash(effective, experiment)
        exp_dir = out_dir / cfg_hash
        exp_dir.mkdir(parents=True, exist_ok=True)
        _write_or_check_snapshot(exp_dir, effective, experiment, cfg_hash)
        planned.append((experiment, cfg_hash, exp_dir))
        for seed in seeds:
            jobs_args.append((experiment, cfg_hash, exp_dir / f"seed{seed}", seed))

    if jobs > 1:
        if dataset_dir is None:
            raise ValueError("parallel matrix execution needs dataset_dir for worker processes")
        from concurrent.futures import ProcessPoolExecutor

        pending = [
            (str(dataset_dir), cfg, exp, seed, str(run_dir), True)
            for exp, _h, run_dir, seed in jobs_args
            if not (run_dir / "result.json").exists()
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_matrix_worker, pending))
    else:
        for experiment, _h, run_dir, seed in jobs_args:
            run_single(manifest, cfg, experiment, seed, run_dir, quiet=quiet, figures=figures)

    records = []
    for experiment, cfg_hash, exp_dir in planned:
        per_seed = {}
        for seed in seeds:
            payload = json.loads((exp_dir / f"seed{seed}" / "result.json").read_text())
            per_seed[seed] = float(payload["dice"])
        records.append(make_result_record(cfg, experiment, per_seed))
    write_results_csv(records, out_dir / "results.csv")
    write_aggregate_csv(records, out_dir / "aggregate.csv")
    return records


def _write_or_check_snapshot(exp_dir, cfg, experiment, cfg_hash):
    snapshot = dump_config_ini(cfg)
    snap_path = exp_dir / "config.snapshot.ini"
    if snap_path.exists():
        if snap_path.read_text() != snapshot:
            raise ValueError(f"config hash collision in {exp_dir}: differing configs")
    else:
        snap_path.write_text(snapshot)


def enumerate_matrix(cfg: Config):
    """Expand the matrix section into concrete experiment configs."""
    base = cfg.experiment
    pairs = [(base.source, base.target)]
    if cfg.matrix.both_directions:
        pairs.append((base.target, base.source))
    experiments = []
    for source, target in pairs:
        for fraction in cfg.matrix.source_fractions:
            for ablation in cfg.matrix.ablations:
                experiments.append(
                    replace(
                        base,
                        source=source,
                        target=target,
                        source_annotation_fraction=fraction,
                        ablation=ablation,
                        baseline=False,
                    )
                )
        if cfg.matrix.include_baseline:
            experiments.append(replace(base, source=source, target=target, baseline=True))
    return experiments


# --------------------------------------------------------------------------
# CSV / figure emission


def write_results_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            for row in record.csv_rows():
                writer.writerow(row)
    return path


def write_aggregate_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=("config_hash", "source", "target", "src_frac", "tgt_frac", "ablation",
                        "n_seeds", "mean_dice", "std_dice"),
        )
        writer.writeheader()
        for r in records:
            writer.writerow({
                "config_hash": r.config_hash,
                "source": r.source,
                "target": r.target,
                "src_frac": r.source_fraction,
                "tgt_frac": r.target_fraction,
                "ablation": "baseline" if r.baseline else r.ablation,
                "n_seeds": len(r.per_seed),
                "mean_dice": r.mean,
                "std_dice": r.std,
            })
    return path


def write_curve_csv(records, path):
    """Dice vs source-annotation-fraction for the unablated model."""
    rows = sorted(
        (r for r in records if not r.baseline and r.ablation == "none"),
        key=lambda r: r.source_fraction,
    )
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("src_frac", "mean_dice", "std_dice"))
        writer.writeheader()
        for r in rows:
            writer.writerow({"src_frac": r.source_fraction, "mean_dice": r.mean, "std_dice": r.std})
    return path


def save_gray_png(path, array01):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.round(np.asarray(array01, dtype=np.float64) * 65535.0), 0, 65535)
    Image.fromarray(q.astype(np.uint16)).save(path)
    return path


def relative_dice_change(ablated_mean, full_mean):
    """Relative change of an ablated run vs the full model; negative = worse."""
    return (ablated_mean - full_mean) / full_mean


def generate_figures(model, manifest, experiment, out_dir, n_samples=3):
    """Presence-to-absence panels and per-decoder attention heatmaps for a few
    test slices of each modality, written as PNGs at input resolution."""
    out_dir = Path(out_dir)
    written = []
    model.eval()
    with torch.no_grad():
        for modality in ("S", "T"):
            diseased = manifest.partition("test", modality=modality, domain="P")[:n_samples]
            if not diseased:
                continue
            x = _to_tensor([s.image for s in diseased])
            out = model.presence_to_absence(x, modality)
            probs = model.segment(x, modality)
            for i, sample in enumerate(diseased):
                stem = out_dir / "panels" / f"{modality}_{sample.subject_id:05d}_{sample.slice_index:02d}"
                written.append(save_gray_png(stem.with_name(stem.name + "_input.png"), sample.image))
                written.append(
                    save_gray_png(stem.with_name(stem.name + "_healthy.png"), out["healthy"][i, 0].numpy())
                )
                residual01 = (out["residual"][i, 0].numpy() + 1.0) / 2.0
                written.append(save_gray_png(stem.with_name(stem.name + "_residual.png"), residual01))
                written.append(
                    save_gray_png(stem.with_name(stem.name + "_segmentation.png"), probs[i, 0].numpy())
                )
            maps = model.attention_maps(x, modality)
            for decoder_name, alphas in maps.items():
                for gate_idx, alpha in enumerate(alphas):
                    arr = alpha[0, 0].numpy()
                    written.append(
                        save_gray_png(
                            out_dir / "attention" / f"{modality}_{decoder_name}_gate{gate_idx}.png",
                            arr,
                        )
                    )
    model.train()
    return written


def emit_report(records, attention_maps=None, panels=None, out_dir="report"):
    """Write the results CSVs (always) plus any provided figure arrays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        write_results_csv(records, out_dir / "results.csv"),
        write_aggregate_csv(records, out_dir / "aggregate.csv"),
        write_curve_csv(records, out_dir / "dice_vs_fraction.csv"),
    ]
    try:
        if attention_maps:
            for name, arrays in attention_maps.items():
                for i, arr in enumerate(arrays):
                    written.append(save_gray_png(out_dir / "attention" / f"{name}_{i}.png", arr))
        if panels:
            for i, panel in enumerate(panels):
                for part, arr in panel.items():
                    written.append(save_gray_png(out_dir / "panels" / f"panel{i}_{part}.png", arr))
    except Exception as exc:  # rendering is best-effort; CSVs are already out
        print(f"MGENSEG report rendering failed: {exc}", flush=True)
    return written
