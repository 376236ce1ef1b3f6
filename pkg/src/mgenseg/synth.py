"""Procedural bi-modal 2D dataset with weak labels and ground-truth masks.

Pipeline per slice: a modality-neutral anatomy phantom, an optional implanted
lesion blob, then a per-modality appearance transform. Subjects are split
80/10/10 into train/val/test and each subject belongs to exactly one
modality, so the two modality populations are unpaired.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .config import ConfigError, SynthConfig
from .data import DatasetManifest, SliceSample
from . import config as _config_mod

_PLACEMENT_ATTEMPTS = 8
_MIN_TISSUE = 0.02  # styled tissue floor; keeps foreground > 0 after 16-bit quantization


class LesionPlacementError(RuntimeError):
    pass


def _mix_seed(*parts):
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def generate_phantom(seed, config):
    """Modality-neutral anatomy image in [0,1]: smooth tissue on zero background."""
    if config.image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {config.image_size}")
    n = config.image_size
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy = (yy - (n - 1) / 2) / (n / 2)
    xx = (xx - (n - 1) / 2) / (n / 2)
    cy, cx = rng.uniform(-0.05, 0.05, size=2)
    ry = rng.uniform(0.60, 0.72)
    rx = rng.uniform(0.68, 0.82)
    theta = rng.uniform(-0.35, 0.35)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    r2 = (u / rx) ** 2 + (v / ry) ** 2
    foreground = r2 <= 1.0

    base = 0.52 + 0.18 * (1.0 - r2)
    slow = gaussian_filter(rng.standard_normal((n, n)), sigma=n / 10.0)
    slow /= max(slow.std(), 1e-8)
    fine = gaussian_filter(rng.standard_normal((n, n)), sigma=max(n / 32.0, 0.8))
    fine /= max(fine.std(), 1e-8)
    base = base + 0.10 * slow + 0.05 * fine

    # Dark ventricle-like pockets near the center.
    for _ in range(int(rng.integers(1, 3))):
        py, px = rng.uniform(-0.25, 0.25, size=2)
        s = rng.uniform(0.05, 0.12)
        d2 = ((xx - cx - px) ** 2 + (yy - cy - py) ** 2) / s
        base = base - 0.30 * np.exp(-d2)

    img = np.clip(base, 0.08, 0.92) * foreground
    return img.astype(np.float32)


def foreground_of(image):
    return image > 0


def _blob_mask(shape, center, radius, rng):
    """Connected irregular blob: union of jittered disks around center."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    mask = np.zeros(shape, dtype=bool)
    n_disks = int(rng.integers(2, 4))
    for _ in range(n_disks):
        dy, dx = rng.uniform(-0.45, 0.45, size=2) * radius
        r = radius * rng.uniform(0.55, 0.9)
        mask |= (yy - center[0] - dy) ** 2 + (xx - center[1] - dx) ** 2 <= r**2
    mask |= (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= (0.6 * radius) ** 2
    return mask


def implant_lesion(phantom, seed, config, force=None):
    """Add a bright lesion blob inside the foreground.

    Returns (image, mask). With probability 1 - lesion_probability (or
    force=False) the phantom is returned unchanged with an empty mask.
    Placement retries with a smaller radius when the blob does not fit and a
    larger one when it falls below the diseased threshold; after bounded
    attempts it gives up.
    """
    if phantom.min() < 0 or phantom.max() > 1:
        raise ValueError("phantom must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = np.zeros(phantom.shape, dtype=np.uint8)
    diseased = rng.uniform() < config.lesion_probability
    if force is not None:
        diseased = force
    if not diseased:
        return phantom.copy(), mask

    fg = foreground_of(phantom)
    if not fg.any():
        raise LesionPlacementError("phantom has no foreground")
    dist = distance_transform_edt(fg)
    radius = rng.uniform(config.lesion_radius_min, config.lesion_radius_max)
    blob = None
    for _ in range(_PLACEMENT_ATTEMPTS):
        valid = dist > radius + 1.0
        if not valid.any():
            radius = max(1.5, radius * 0.7)  # too big for this foreground
            continue
        flat = np.flatnonzero(valid)
        center = np.unravel_index(rng.choice(flat), phantom.shape)
        candidate = _blob_mask(phantom.shape, center, radius, rng) & fg
        frac = candidate.sum() / fg.sum()
        if frac >= config.diseased_threshold:
            blob = candidate
            break
        radius = min(radius * 1.4, max(config.lesion_radius_max, radius * 1.4))
    if blob is None:
        raise LesionPlacementError("could not place a lesion above the diseased threshold")

    kernel = gaussian_filter(blob.astype(np.float64), sigma=1.3)
    kernel /= kernel.max()
    kernel[kernel < 0.02] = 0.0
    amplitude = rng.uniform(config.lesion_contrast_min, config.lesion_contrast_max)
    image = np.clip(phantom + (amplitude * kernel * fg).astype(np.float32), 0.0, 1.0)
    mask[blob] = 1
    return image.astype(np.float32), mask


def apply_modality_style(image, modality, config, seed=0):
    """Render a neutral image in the appearance of one modality.

    Monotone (or inverting) intensity transfer, then texture and noise on
    tissue only. Output stays in [0,1]; tissue is floored slightly above 0 so
    the foreground remains recoverable as image > 0.
    """
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    style = config.style_for(modality)
    if style.is_identity():
        return image.copy()

    out = image.astype(np.float64)
    tissue = image > 0
    if style.invert:
        out = 1.0 - out
    if style.gamma != 1.0:
        out = np.power(np.clip(out, 0.0, 1.0), style.gamma)
    if style.contrast != 1.0 or style.brightness != 0.0:
        out = 0.5 + style.contrast * (out - 0.5) + style.brightness

    rng = np.random.default_rng(seed)
    if style.texture_amp > 0.0:
        field = gaussian_filter(rng.standard_normal(image.shape), sigma=style.texture_scale)
        field /= max(field.std(), 1e-8)
        out = out + style.texture_amp * field * tissue
    if style.noise_amp > 0.0:
        out = out + style.noise_amp * rng.standard_normal(image.shape) * tissue

    out = np.clip(out, 0.0, 1.0)
    if not style.invert and style.brightness == 0.0:
        # keep background exactly zero and tissue strictly positive
        out = np.where(tissue, np.clip(out, _MIN_TISSUE, 1.0), 0.0)
    return out.astype(np.float32)


def label_domain(mask, foreground, threshold):
    """Weak label: presence iff the lesion covers >= threshold of the foreground."""
    if mask.shape != foreground.shape:
        raise ValueError("mask and foreground shapes differ")
    fg_area = int(np.count_nonzero(foreground))
    if fg_area == 0:
        raise ValueError("empty foreground")
    frac = float(np.count_nonzero(mask)) / fg_area
    return "P" if frac >= threshold else "A"


def slice_disposition(mask, foreground, threshold):
    """P, A, or "exclude" for slices whose lesion is nonzero but sub-threshold."""
    fg_area = int(np.count_nonzero(foreground))
    if fg_area == 0:
        raise ValueError("empty foreground")
    frac = float(np.count_nonzero(mask)) / fg_area
    if frac == 0.0:
        return "A"
    if frac < threshold:
        return "exclude"
    return "P"


def _make_slice(modality, subject_id, slice_index, config, force=None):
    ss = _mix_seed(config.seed, subject_id, slice_index, 0x51)
    phantom_seed, lesion_seed, style_seed = (int(s) for s in ss.generate_state(3))
    phantom = generate_phantom(phantom_seed, config)
    neutral, mask = implant_lesion(phantom, lesion_seed, config, force=force)
    fg = foreground_of(phantom)
    domain = label_domain(mask, fg, config.diseased_threshold)
    styled = apply_modality_style(neutral, modality, config, seed=style_seed)
    return SliceSample(
        image=styled,
        modality=modality,
        domain=domain,
        mask=mask if domain == "P" else None,
        annotated=domain == "P",
        subject_id=subject_id,
        slice_index=slice_index,
    )


def build_dataset(config):
    """Deterministic unpaired bi-modal dataset as a DatasetManifest."""
    config.validate()
    n = config.n_subjects_per_modality
    samples = []
    for mi, modality in enumerate(("S", "T")):
        split_rng = np.random.default_rng(_mix_seed(config.seed, 0x5B, mi))
        partitions = {}
        order = split_rng.permutation(n)
        n_val = max(1, int(round(0.1 * n)))
        n_test = max(1, int(round(0.1 * n)))
        for rank, idx in enumerate(order):
            sid = mi * n + int(idx)
            if rank < n - n_val - n_test:
                partitions[sid] = "train"
            elif rank < n - n_test:
                partitions[sid] = "val"
            else:
                partitions[sid] = "test"

        modality_samples = []
        for local in range(n):
            sid = mi * n + local
            for k in range(config.slices_per_subject):
                s = _make_slice(modality, sid, k, config)
                s.partition = partitions[sid]
                modality_samples.append(s)

        _ensure_domain_coverage(modality_samples, modality, config)
        samples.extend(modality_samples)

    manifest = DatasetManifest(
        samples=samples,
        image_size=config.image_size,
        source_hash=_config_mod.config_hash(config),
    )
    manifest.validate()
    _check_cells(manifest)
    return manifest


def _ensure_domain_coverage(samples, modality, config):
    """Regenerate one slice per deficient (partition, domain) cell, forcing
    the missing domain. Deterministic: always the lexically first slice."""
    for part in ("train", "val", "test"):
        cell = [s for s in samples if s.partition == part]
        if not cell:
            raise ConfigError(f"no subjects landed in partition {part!r}")
        for want in ("A", "P"):
            if any(s.domain == want for s in cell):
                continue
            victim = min(cell, key=lambda s: (s.subject_id, s.slice_index))
            forced = _make_slice(
                modality, victim.subject_id, victim.slice_index, config, force=(want == "P")
            )
            forced.partition = part
            samples[samples.index(victim)] = forced


def _check_cells(manifest):
    counts = manifest.counts()
    for part in ("train", "val", "test"):
        for modality in ("S", "T"):
            for domain in ("A", "P"):
                if counts.get((part, modality, domain), 0) == 0:
                    raise ConfigError(
                        f"dataset too small: no ({modality},{domain}) samples in {part}"
                    )


def style_gap(config, n_phantoms=100):
    """Mean absolute pixel difference between the two modality renderings of
    identical neutral images. Used to verify the appearance gap is real."""
    diffs = []
    for i in range(n_phantoms):
        ss = _mix_seed(config.seed, 0xD1F, i)
        phantom_seed, style_seed = (int(s) for s in ss.generate_state(2))
        phantom = generate_phantom(phantom_seed, config)
        a = apply_modality_style(phantom, "S", config, seed=style_seed)
        b = apply_modality_style(phantom, "T", config, seed=style_seed)
        diffs.append(float(np.abs(a - b).mean()))
    return float(np.mean(diffs))
