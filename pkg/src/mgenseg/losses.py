"""Loss terms for the joint translation + segmentation objective.

Every term is a plain function of tensors so it can be unit-tested against
closed-form values. The weighted sum is assembled by total_loss; the
discriminator-side hinge losses are optimized separately from the generator.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5

COMPONENT_NAMES = ("seg", "adv_mod", "cyc_mod", "adv_gen", "rec_gen", "lat_gen")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the weighted-sum objective. All must be non-negative."""

    seg: float = 5.0
    adv_mod: float = 3.0
    cyc_mod: float = 20.0
    adv_gen: float = 6.0
    rec_gen: float = 20.0
    lat_gen: float = 2.0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative, got {v}")
        return self

    def as_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LossReport:
    """Per-step component values (floats) plus the weighted generator total."""

    seg: float = 0.0
    adv_mod: float = 0.0
    cyc_mod: float = 0.0
    adv_gen: float = 0.0
    rec_gen: float = 0.0
    lat_gen: float = 0.0
    total: float = 0.0
    disc_gen: float = 0.0
    disc_mod: float = 0.0
    epoch: int = 0
    step: int = 0

    def components(self):
        return {name: getattr(self, name) for name in COMPONENT_NAMES}

    def as_dict(self):
        d = {"epoch": self.epoch, "step": self.step}
        d.update(self.components())
        d["total"] = self.total
        d["disc_gen"] = self.disc_gen
        d["disc_mod"] = self.disc_mod
        return d


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _flatten_batch(x):
    if x.dim() <= 1:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def dice_loss(y, y_hat, smooth=DICE_SMOOTH):
    """Soft Dice loss, averaged over the batch.

    1 - (2*sum(y*y_hat) + smooth) / (sum(y) + sum(y_hat) + smooth), computed
    per sample over all pixels.
    """
    _check_shapes(y, y_hat, "dice_loss")
    yf = _flatten_batch(y.float() if not torch.is_floating_point(y) else y)
    pf = _flatten_batch(y_hat)
    inter = (yf * pf).sum(dim=1)
    denom = yf.sum(dim=1) + pf.sum(dim=1)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return (1.0 - dice).mean()


def seg_loss(y, y_hat_direct, y_hat_translated, smooth=DICE_SMOOTH, annotated=None):
    """Supervised term: Dice against the direct prediction plus Dice against
    the prediction made on the translated rendering of the same image."""
    if annotated is not None and not bool(torch.as_tensor(annotated).all()):
        raise ValueError("seg_loss invoked with unannotated samples")
    return dice_loss(y, y_hat_direct, smooth) + dice_loss(y, y_hat_translated, smooth)


def l1(a, b):
    """Mean absolute elementwise difference."""
    _check_shapes(a, b, "l1")
    return (a - b).abs().mean()


def _require(value, name):
    if value is None:
        raise ValueError(f"missing loss leg: {name}")
    return value


def cyc_mod_loss(
    source_a,
    source_a_cycled,
    target_a,
    target_a_cycled,
    source_p,
    source_p_cycled,
    target_p,
    target_p_cycled,
):
    """Cycle-reconstruction penalty of the modality translation, all four legs."""
    legs = [
        ("source_a", source_a, source_a_cycled),
        ("target_a", target_a, target_a_cycled),
        ("source_p", source_p, source_p_cycled),
        ("target_p", target_p, target_p_cycled),
    ]
    total = 0.0
    for name, orig, cycled in legs:
        _require(orig, name)
        _require(cycled, name + "_cycled")
        total = total + l1(cycled, orig)
    return total


def rec_gen_loss(
    source_a_rec,
    source_a,
    source_p_rec,
    source_p,
    target_a_rec,
    target_a,
    target_p_rec,
    target_p,
):
    """Image-reconstruction penalty of the presence/absence translation."""
    legs = [
        ("source_a", source_a_rec, source_a),
        ("source_p", source_p_rec, source_p),
        ("target_a", target_a_rec, target_a),
        ("target_p", target_p_rec, target_p),
    ]
    total = 0.0
    for name, rec, orig in legs:
        _require(rec, name + "_rec")
        _require(orig, name)
        total = total + l1(rec, orig)
    return total


def lat_gen_loss(codes, reencoded, u_samples, u_reencoded):
    """Latent-code reconstruction: L1 between each original code and its
    re-encoded counterpart, plus L1 pulling the re-encoded sampled lesion
    code back to the draw that generated it."""
    if len(codes) != len(reencoded):
        raise ValueError("codes and reencoded must pair up")
    if len(u_samples) != len(u_reencoded):
        raise ValueError("u_samples and u_reencoded must pair up")
    total = 0.0
    for i, (c, c_rec) in enumerate(zip(codes, reencoded)):
        _require(c, f"code[{i}]")
        _require(c_rec, f"reencoded[{i}]")
        total = total + l1(c_rec, c)
    for i, (u, u_rec) in enumerate(zip(u_samples, u_reencoded)):
        _require(u, f"u_sample[{i}]")
        _require(u_rec, f"u_reencoded[{i}]")
        total = total + l1(u_rec, u)
    return total


def hinge_d(real_scores, fake_scores):
    """Discriminator hinge: push real scores above +1 and fake below -1."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g(fake_scores):
    """Generator hinge: raise the discriminator's score of fakes."""
    return -fake_scores.mean()


def total_loss(components, weights):
    """Weighted sum of the six generator-side components."""
    weights.validate()
    missing = [k for k in COMPONENT_NAMES if k not in components]
    if missing:
        raise ValueError(f"missing loss components: {missing}")
    total = 0.0
    wdict = weights.as_dict()
    for name in COMPONENT_NAMES:
        total = total + wdict[name] * components[name]
    return total
