"""Training loop: symmetric per-modality branches, optimizer orchestration,
on-the-fly augmentation, checkpointing, and deterministic seed management.

Every source of randomness in an epoch derives from (run seed, epoch), so a
run resumed from the epoch boundary replays the remaining epochs exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import rotate as nd_rotate

from .config import Config, ExperimentConfig
from .losses import LossReport, dice_loss, hinge_d, hinge_g, l1, total_loss
from .model import MGenSeg, build_model, save_checkpoint
from .synth import _mix_seed

MODALITIES = ("S", "T")
STDOUT_PREFIX = "MGENSEG"


class TrainingDiverged(RuntimeError):
    def __init__(self, components):
        super().__init__(f"non-finite loss; components: {components}")
        self.components = components


@dataclass
class AccessLog:
    """Records which (modality, partition) groups were read, and when."""

    reads: set = field(default_factory=set)

    def record(self, modality, partition, phase):
        self.reads.add((modality, partition, phase))

    def modalities_read(self, phase=None):
        return {
            m for (m, _p, ph) in self.reads if phase is None or ph == phase
        }


# --------------------------------------------------------------------------
# Augmentation


def augment(sample, seed, flip=True, rotate=True, intensity=True):
    """Label-preserving augmentation; the mask gets the identical spatial
    transform. The weak domain tag is never recomputed."""
    rng = np.random.default_rng(seed)
    img = sample.image
    mask = sample.mask
    do_flip = rng.uniform() < 0.5
    angle = rng.uniform(-10.0, 10.0)
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.1, 0.1)

    if flip and do_flip:
        img = img[:, ::-1].copy()
        if mask is not None:
            mask = mask[:, ::-1].copy()
    if rotate:
        img = nd_rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        img = np.clip(img, 0.0, 1.0)
        if mask is not None:
            mask = nd_rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    if intensity:
        img = np.clip(img * scale + shift, 0.0, 1.0)
    return replace(
        sample,
        image=np.ascontiguousarray(img, dtype=np.float32),
        mask=None if mask is None else np.ascontiguousarray(mask, dtype=np.uint8),
    )


# --------------------------------------------------------------------------
# Batch assembly


@dataclass
class ModalityBatch:
    absence: torch.Tensor  # (nA, 1, H, W)
    presence: torch.Tensor  # (nP, 1, H, W)
    presence_mask: torch.Tensor  # (nP, 1, H, W) float, zeros where unannotated
    presence_annotated: torch.Tensor  # (nP,) bool


@dataclass
class StepBatch:
    per_modality: dict  # modality -> ModalityBatch

    def __getitem__(self, modality):
        return self.per_modality[modality]


def _to_tensor(images):
    return torch.from_numpy(np.stack(images, axis=0)).unsqueeze(1).float()


class BatchBuilder:
    """Deterministic epoch batching over the four (modality, domain) cells."""

    def __init__(self, manifest, train_cfg, seed, access_log=None):
        self.cfg = train_cfg
        self.seed = int(seed)
        self.access_log = access_log
        self.cells = {}
        for m in MODALITIES:
            for d in ("A", "P"):
                cell = manifest.partition("train", modality=m, domain=d)
                if not cell:
                    raise ValueError(f"empty training cell ({m}, {d})")
                self.cells[(m, d)] = cell
        self.n_presence = max(1, math.ceil(train_cfg.batch_size / 2))
        self.n_absence = max(1, train_cfg.batch_size - self.n_presence)
        if train_cfg.steps_per_epoch > 0:
            self.steps_per_epoch = train_cfg.steps_per_epoch
        else:
            biggest = max(len(self.cells[(m, "P")]) for m in MODALITIES)
            self.steps_per_epoch = max(1, math.ceil(biggest / self.n_presence))

    def epoch_batches(self, epoch):
        rng = np.random.default_rng(_mix_seed(self.seed, 0xBA, epoch))
        plans = {}
        for key, cell in self.cells.items():
            need = (self.n_presence if key[1] == "P" else self.n_absence) * self.steps_per_epoch
            order = rng.permutation(len(cell))
            plans[key] = np.resize(order, need)
        aug_seeds = rng.integers(0, 2**31 - 1, size=self.steps_per_epoch * 4 * self.cfg.batch_size)
        seed_iter = iter(aug_seeds.tolist())

        for step in range(self.steps_per_epoch):
            per_modality = {}
            for m in MODALITIES:
                if self.access_log is not None:
                    self.access_log.record(m, "train", "fit")
                picked = {}
                for d in ("A", "P"):
                    count = self.n_presence if d == "P" else self.n_absence
                    idxs = plans[(m, d)][step * count : (step + 1) * count]
                    samples = [self.cells[(m, d)][i] for i in idxs]
                    if self.cfg.augment:
                        samples = [
                            augment(
                                s,
                                next(seed_iter),
                                flip=self.cfg.augment_flip,
                                rotate=self.cfg.augment_rotate,
                                intensity=self.cfg.augment_intensity,
                            )
                            for s in samples
                        ]
                    picked[d] = samples
                masks = [
                    s.mask if (s.annotated and s.mask is not None) else np.zeros_like(s.image, dtype=np.uint8)
                    for s in picked["P"]
                ]
                per_modality[m] = ModalityBatch(
                    absence=_to_tensor([s.image for s in picked["A"]]),
                    presence=_to_tensor([s.image for s in picked["P"]]),
                    presence_mask=_to_tensor([m_.astype(np.float32) for m_ in masks]),
                    presence_annotated=torch.tensor([s.annotated for s in picked["P"]]),
                )
            yield StepBatch(per_modality=per_modality)


# --------------------------------------------------------------------------
# One optimization step


def _other(modality):
    return "T" if modality == "S" else "S"


def build_optimizers(model, train_cfg):
    """One group for all generators, one per discriminator; no overlap."""
    make = lambda params: torch.optim.Adam(
        params,
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        amsgrad=True,
    )
    opt_gen = make(model.generator_parameters())
    opt_disc = {name: make(params) for name, params in model.discriminator_groups().items()}
    return opt_gen, opt_disc


def _index_latents(pair, skips, idx):
    from .model import LatentPair

    return (
        LatentPair(common=pair.common[idx], unique=pair.unique[idx]),
        [s[idx] for s in skips],
    )


def train_step(model, batch, weights, opt_gen, opt_disc, torch_gen, ablation="none"):
    """Run both modality branches, apply one generator update and one
    discriminator update, and report all loss components.

    Each real sub-batch is encoded once and the codes are reused by every
    decoder that consumes them (they share the encoder anyway).
    """
    w = weights
    gen_on = (w.adv_gen > 0) or (w.rec_gen > 0) or (w.lat_gen > 0)
    a2p_on = gen_on and ablation != "no_A_to_P"
    seg_on = w.seg > 0
    translation_on = (w.cyc_mod > 0) or (w.adv_mod > 0) or seg_on
    translation_domains = ("P",) if ablation == "no_healthy_mod_translation" else ("A", "P")

    comp = {name: 0.0 for name in ("seg", "adv_mod", "cyc_mod", "adv_gen", "rec_gen", "lat_gen")}
    detached = {m: {} for m in MODALITIES}  # fakes reused by the discriminator pass

    def sub_batch(m, d):
        return batch[m].presence if d == "P" else batch[m].absence

    # ----- shared encodings of the real sub-batches -----
    enc = {}
    for m in MODALITIES:
        need_p = gen_on or seg_on or (translation_on and not model.unshared_latents)
        need_a = gen_on or (
            translation_on and not model.unshared_latents and "A" in translation_domains
        )
        if need_p:
            enc[(m, "P")] = model.encode(batch[m].presence, m)
        if need_a:
            enc[(m, "A")] = model.encode(batch[m].absence, m)

    # ----- presence/absence branch, per modality -----
    if gen_on:
        rec_legs, lat_code_legs, lat_u_legs, adv_gen_terms = [], [], [], []
        for m in MODALITIES:
            pair_p, skips_p = enc[(m, "P")]
            healthy = model.decode_healthy(pair_p, skips_p, m)
            residual_p = model.decode_residual(pair_p, skips_p, m)
            rec_legs.append((healthy + residual_p, batch[m].presence))
            pa_pair, _ = model.encode(healthy, m)
            lat_code_legs.append((pair_p.common, pa_pair.common))
            if w.adv_gen > 0:
                adv_gen_terms.append(model.discriminate(healthy, "gen", m, "A"))
            detached[m]["healthy_from_p"] = healthy.detach()

            pair_a, skips_a = enc[(m, "A")]
            healthy_rec = model.decode_healthy(pair_a, skips_a, m)
            rec_legs.append((healthy_rec, batch[m].absence))
            if a2p_on:
                u_sample = torch.randn(
                    batch[m].absence.shape[0], model.cfg.unique_channels, generator=torch_gen
                )
                diseased = healthy_rec + model.decode_residual(pair_a, skips_a, m, u=u_sample)
                ap_pair, _ = model.encode(diseased, m)
                lat_code_legs.append((pair_a.common, ap_pair.common))
                lat_u_legs.append((u_sample, ap_pair.unique))
                if w.adv_gen > 0:
                    adv_gen_terms.append(model.discriminate(diseased, "gen", m, "P"))
                detached[m]["diseased_from_a"] = diseased.detach()

        if w.rec_gen > 0:
            comp["rec_gen"] = sum(l1(rec, ref) for rec, ref in rec_legs)
        if w.lat_gen > 0:
            comp["lat_gen"] = sum(l1(b_, a_) for a_, b_ in lat_code_legs) + sum(
                l1(b_, a_) for a_, b_ in lat_u_legs
            )
        if w.adv_gen > 0:
            comp["adv_gen"] = sum(hinge_g(scores) for scores in adv_gen_terms)

    # ----- modality translation branch -----
    translated = {m: {} for m in MODALITIES}  # translated[m][d]: m's image in other appearance
    translated_enc = {}  # codes of translated[m][d] under the other modality's encoder
    if translation_on:
        cyc_legs, adv_mod_terms = [], []
        for m in MODALITIES:
            o = _other(m)
            for d in translation_domains:
                if model.unshared_latents:
                    pair, skips = model.encode(sub_batch(m, d), m, branch="translation")
                else:
                    pair, skips = enc[(m, d)]
                x_t = model.decode_to_modality(pair, skips, o)
                translated[m][d] = x_t
                detached[o].setdefault("mod_fakes", []).append(x_t.detach())
                pair_t, skips_t = model.encode(x_t, o, branch="translation")
                translated_enc[(m, d)] = (pair_t, skips_t)
                if w.cyc_mod > 0:
                    x_cyc = model.decode_to_modality(pair_t, skips_t, m)
                    cyc_legs.append((x_cyc, sub_batch(m, d)))
                if w.adv_mod > 0:
                    adv_mod_terms.append(model.discriminate(x_t, "mod", o))
        if w.cyc_mod > 0:
            comp["cyc_mod"] = sum(l1(cyc, ref) for cyc, ref in cyc_legs)
        if w.adv_mod > 0:
            comp["adv_mod"] = sum(hinge_g(scores) for scores in adv_mod_terms)

    # ----- segmentation on annotated slices (direct + translated rendering) -----
    if seg_on:
        seg_terms = []
        for m in MODALITIES:
            mb = batch[m]
            ann = mb.presence_annotated
            if not bool(ann.any()):
                continue
            o = _other(m)
            idx = torch.nonzero(ann, as_tuple=True)[0]
            y = mb.presence_mask[idx]
            pair_p, skips_p = _index_latents(*enc[(m, "P")], idx)
            y_hat = model.decode_segmentation(pair_p, skips_p, m)
            seg_terms.append(dice_loss(y, y_hat))
            if "P" in translated[m]:
                if model.unshared_latents:
                    # segmentation reads the shared/seg encoder, not the
                    # translation-only one
                    pair_t, skips_t = model.encode(translated[m]["P"][idx], o)
                else:
                    pair_t, skips_t = _index_latents(*translated_enc[(m, "P")], idx)
                y_hat_t = model.decode_segmentation(pair_t, skips_t, o)
                seg_terms.append(dice_loss(y, y_hat_t))
        if seg_terms:
            comp["seg"] = sum(seg_terms)

    gen_total = total_loss(comp, w)

    values = {k: float(v) if isinstance(v, float) else float(v.item()) for k, v in comp.items()}
    total_value = float(gen_total) if isinstance(gen_total, float) else float(gen_total.item())
    if not all(math.isfinite(v) for v in list(values.values()) + [total_value]):
        raise TrainingDiverged({**values, "total": total_value})

    if torch.is_tensor(gen_total) and gen_total.requires_grad:
        opt_gen.zero_grad(set_to_none=True)
        gen_total.backward()
        opt_gen.step()

    # ----- discriminator updates on detached fakes -----
    disc_gen_value = 0.0
    disc_mod_value = 0.0
    if w.adv_gen > 0 and gen_on:
        for m in MODALITIES:
            n_real = batch[m].absence.shape[0]
            scores = model.discriminate(
                torch.cat([batch[m].absence, detached[m]["healthy_from_p"]], dim=0), "gen", m, "A"
            )
            d_loss = hinge_d(scores[:n_real], scores[n_real:])
            if "diseased_from_a" in detached[m]:
                n_real = batch[m].presence.shape[0]
                scores = torch.cat(
                    [batch[m].presence, detached[m]["diseased_from_a"]], dim=0
                )
                scores = model.discriminate(scores, "gen", m, "P")
                d_loss = d_loss + hinge_d(scores[:n_real], scores[n_real:])
            opt = opt_disc[f"disc_gen_{m}"]
            opt.zero_grad(set_to_none=True)
            d_loss.backward()
            opt.step()
            disc_gen_value += float(d_loss.item())
    if w.adv_mod > 0 and translation_on:
        for m in MODALITIES:
            fakes = detached[m].get("mod_fakes")
            if not fakes:
                continue
            reals = [sub_batch(m, d) for d in translation_domains]
            n_real = sum(r.shape[0] for r in reals)
            scores = model.discriminate(torch.cat(reals + fakes, dim=0), "mod", m)
            d_loss = hinge_d(scores[:n_real], scores[n_real:])
            opt = opt_disc[f"disc_mod_{m}"]
            opt.zero_grad(set_to_none=True)
            d_loss.backward()
            opt.step()
            disc_mod_value += float(d_loss.item())

    if not (math.isfinite(disc_gen_value) and math.isfinite(disc_mod_value)):
        raise TrainingDiverged({**values, "disc_gen": disc_gen_value, "disc_mod": disc_mod_value})

    return LossReport(
        total=total_value,
        disc_gen=disc_gen_value,
        disc_mod=disc_mod_value,
        **values,
    )


# --------------------------------------------------------------------------
# Segmentation inference helpers (shared with evaluation)


def predict_probabilities(model, samples, bundle_modality, batch_size=32):
    """Segmentation probability maps for a list of samples, batched."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            x = _to_tensor([s.image for s in chunk])
            out.append(model.segment(x, bundle_modality).squeeze(1).numpy())
    model.train()
    return np.concatenate(out, axis=0) if out else np.zeros((0,))


def hard_dice(pred_binary, mask):
    inter = float(np.logical_and(pred_binary, mask).sum())
    denom = float(pred_binary.sum()) + float(mask.sum())
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def dice_over_samples(model, samples, bundle_modality, threshold=0.5, access_log=None, phase="eval"):
    """Per-slice hard Dice over diseased samples (prediction thresholded)."""
    diseased = [s for s in samples if s.domain == "P"]
    if not diseased:
        raise ValueError("no diseased samples to evaluate")
    if access_log is not None:
        for s in diseased:
            access_log.record(s.modality, s.partition, phase)
            break
    probs = predict_probabilities(model, diseased, bundle_modality)
    scores = [
        hard_dice(probs[i] >= threshold, diseased[i].mask) for i in range(len(diseased))
    ]
    return scores


# --------------------------------------------------------------------------
# Full training run


@dataclass
class FitResult:
    run_dir: Path
    best_epoch: int
    best_val_dice: float
    metrics_path: Path
    best_checkpoint: Path
    state_path: Path
    access_log: AccessLog
    epochs_run: int


def _epoch_torch_generator(seed, epoch):
    g = torch.Generator()
    g.manual_seed(int(np.random.default_rng(_mix_seed(seed, 0xE9, epoch)).integers(0, 2**62)))
    return g


def _validation_dice(model, manifest, experiment, threshold, access_log):
    scores = {}
    for role, m in (("target", experiment.target), ("source", experiment.source)):
        samples = manifest.partition("val", modality=m, domain="P")
        scores[role] = float(
            np.mean(dice_over_samples(model, samples, m, threshold, access_log, phase="fit_val"))
        )
    return scores


def fit(manifest, cfg: Config, experiment: ExperimentConfig, seed, run_dir, resume=False, quiet=False):
    """Train one model; checkpoint the epoch with the best target validation
    Dice; emit a line-delimited metrics log. Deterministic in (cfg, seed)."""
    cfg.validate()
    experiment.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    best_path = run_dir / "best.pt"
    state_path = run_dir / "state.pt"

    from .config import run_config_hash  # local import to keep module deps one-way

    cfg_hash = run_config_hash(cfg, experiment)
    access_log = AccessLog()

    model = build_model(
        cfg.model,
        seed=int(np.random.default_rng(_mix_seed(seed, 0x137)).integers(0, 2**62)),
        unshared_latents=experiment.ablation == "unshared_latents",
    )
    opt_gen, opt_disc = build_optimizers(model, cfg.training)

    start_epoch = 0
    best_val = -1.0
    best_epoch = -1
    if resume and state_path.exists():
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        opt_gen.load_state_dict(state["opt_gen"])
        for name, opt in opt_disc.items():
            opt.load_state_dict(state["opt_disc"][name])
        start_epoch = state["epoch"] + 1
        best_val = state["best_val"]
        best_epoch = state["best_epoch"]
        _truncate_metrics(metrics_path, start_epoch)
    elif metrics_path.exists():
        metrics_path.unlink()

    builder = BatchBuilder(manifest, cfg.training, seed, access_log)
    epochs = cfg.training.epochs

    with metrics_path.open("a") as log:
        for epoch in range(start_epoch, epochs):
            torch_gen = _epoch_torch_generator(seed, epoch)
            totals = []
            for step, batch in enumerate(builder.epoch_batches(epoch)):
                report = train_step(
                    model,
                    batch,
                    cfg.losses,
                    opt_gen,
                    opt_disc,
                    torch_gen,
                    ablation=experiment.ablation,
                )
                report.epoch = epoch
                report.step = step
                totals.append(report.total)
                if cfg.training.log_every_step:
                    log.write(json.dumps({"kind": "step", **report.as_dict()}) + "\n")

            val = _validation_dice(
                model, manifest, experiment, experiment.eval_threshold, access_log
            )
            epoch_rec = {
                "kind": "epoch",
                "epoch": epoch,
                "gen_total_mean": float(np.mean(totals)),
                "val_dice_target": val["target"],
                "val_dice_source": val["source"],
            }
            log.write(json.dumps(epoch_rec) + "\n")
            log.flush()
            if not quiet:
                print(
                    f"{STDOUT_PREFIX} epoch={epoch + 1}/{epochs} "
                    f"gen_total={epoch_rec['gen_total_mean']:.4f} "
                    f"val_dice_target={val['target']:.4f} val_dice_source={val['source']:.4f}",
                    flush=True,
                )

            if val["target"] > best_val:
                best_val = val["target"]
                best_epoch = epoch
                save_checkpoint(
                    best_path, model, config_hash=cfg_hash, epoch=epoch, val_dice=best_val
                )
            torch.save(
                {
                    "model": model.state_dict(),
                    "opt_gen": opt_gen.state_dict(),
                    "opt_disc": {name: opt.state_dict() for name, opt in opt_disc.items()},
                    "epoch": epoch,
                    "best_val": best_val,
                    "best_epoch": best_epoch,
                    "seed": seed,
                },
                state_path,
            )

    return FitResult(
        run_dir=run_dir,
        best_epoch=best_epoch,
        best_val_dice=best_val,
        metrics_path=metrics_path,
        best_checkpoint=best_path,
        state_path=state_path,
        access_log=access_log,
        epochs_run=epochs - start_epoch,
    )


def _truncate_metrics(metrics_path, resume_epoch):
    if not metrics_path.exists():
        return
    kept = []
    for line in metrics_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("epoch", 0) < resume_epoch:
            kept.append(line)
    metrics_path.write_text("\n".join(kept) + ("\n" if kept else ""))
