"""Sample and manifest types shared by the synthetic generator and the ingest path.

A dataset is a flat collection of 2D slice samples. Each sample carries a
modality tag (S or T), a weak presence/absence label, an optional pixel mask,
and the id of the subject it came from. Datasets are unpaired: a subject
contributes slices to exactly one modality.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

MODALITIES = ("S", "T")
DOMAINS = ("A", "P")
PARTITIONS = ("train", "val", "test")

MANIFEST_NAME = "manifest.jsonl"


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class SliceSample:
    """One 2D image with its weak label and (for diseased slices) lesion mask."""

    image: np.ndarray  # float32 HxW in [0, 1]
    modality: str  # "S" or "T"
    domain: str  # "A" (absence) or "P" (presence)
    mask: np.ndarray | None  # uint8 HxW in {0, 1}, present for P slices
    annotated: bool
    subject_id: int
    slice_index: int = 0
    partition: str = "train"

    def validate(self):
        if self.modality not in MODALITIES:
            raise DatasetError(f"unknown modality {self.modality!r}")
        if self.domain not in DOMAINS:
            raise DatasetError(f"unknown domain {self.domain!r}")
        if self.partition not in PARTITIONS:
            raise DatasetError(f"unknown partition {self.partition!r}")
        if self.image.ndim != 2:
            raise DatasetError("image must be 2D")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError("image values must lie in [0, 1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise DatasetError("mask shape must equal image shape")
            if not np.isin(self.mask, (0, 1)).all():
                raise DatasetError("mask must be {0,1}-valued")
        if self.annotated and self.mask is None:
            raise DatasetError("annotated sample without a mask")


@dataclass(eq=False)
class DatasetManifest:
    """All samples of a dataset plus bookkeeping about how it was built."""

    samples: list[SliceSample]
    image_size: int
    source_hash: str = ""  # hash of the generating config, for train-time checks
    annotation_fraction: dict[str, float] = field(
        default_factory=lambda: {m: 1.0 for m in MODALITIES}
    )

    def partition(self, name, modality=None, domain=None):
        out = [s for s in self.samples if s.partition == name]
        if modality is not None:
            out = [s for s in out if s.modality == modality]
        if domain is not None:
            out = [s for s in out if s.domain == domain]
        return out

    def counts(self):
        """Sample counts keyed by (partition, modality, domain)."""
        table = {}
        for s in self.samples:
            key = (s.partition, s.modality, s.domain)
            table[key] = table.get(key, 0) + 1
        return table

    def subjects(self, modality=None, partition=None, domain=None):
        ids = set()
        for s in self.samples:
            if modality is not None and s.modality != modality:
                continue
            if partition is not None and s.partition != partition:
                continue
            if domain is not None and s.domain != domain:
                continue
            ids.add(s.subject_id)
        return sorted(ids)

    def validate(self):
        for s in self.samples:
            s.validate()
        # Unpaired: a subject contributes to exactly one modality.
        per_modality = {m: set(self.subjects(modality=m)) for m in MODALITIES}
        overlap = per_modality["S"] & per_modality["T"]
        if overlap:
            raise DatasetError(f"subjects present in both modalities: {sorted(overlap)[:5]}")
        # Partitions are disjoint by subject.
        seen = {}
        for s in self.samples:
            prev = seen.setdefault(s.subject_id, s.partition)
            if prev != s.partition:
                raise DatasetError(f"subject {s.subject_id} appears in {prev} and {s.partition}")


def mask_annotations(manifest, fraction, seed, modality):
    """Keep annotations for ceil(fraction * n) diseased training subjects; hide the rest.

    Selection is by whole subject so no partially-annotated subject leaks
    pixel labels. Validation and test samples are untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DatasetError(f"annotation fraction must be in [0, 1], got {fraction}")
    diseased_subjects = manifest.subjects(modality=modality, partition="train", domain="P")
    n_keep = int(np.ceil(fraction * len(diseased_subjects)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA22, hash(modality) & 0xFFFF]))
    order = rng.permutation(len(diseased_subjects))
    keep = {diseased_subjects[i] for i in order[:n_keep]}

    new_samples = []
    for s in manifest.samples:
        if s.modality == modality and s.partition == "train" and s.domain == "P":
            new_samples.append(replace(s, annotated=s.subject_id in keep))
        else:
            new_samples.append(s)
    fractions = dict(manifest.annotation_fraction)
    fractions[modality] = float(fraction)
    return DatasetManifest(
        samples=new_samples,
        image_size=manifest.image_size,
        source_hash=manifest.source_hash,
        annotation_fraction=fractions,
    )


def annotated_subject_count(manifest, modality):
    return len(
        {
            s.subject_id
            for s in manifest.samples
            if s.modality == modality and s.partition == "train" and s.annotated
        }
    )


# --------------------------------------------------------------------------
# On-disk layout: one directory per (modality, partition) for images and
# masks, plus a line-delimited manifest with one record per line.

def _image_to_png16(arr):
    q = np.clip(np.round(arr * 65535.0), 0, 65535).astype(np.uint16)
    return Image.fromarray(q)


def _png16_to_image(path):
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return arr / 65535.0


def _sample_rel_paths(s):
    stem = f"s{s.subject_id:05d}_{s.slice_index:02d}.png"
    image = f"images/{s.modality}/{s.partition}/{stem}"
    mask = f"masks/{s.modality}/{s.partition}/{stem}" if s.mask is not None else None
    return image, mask


def write_dataset(manifest, out_dir, force=False):
    """Write images, masks and the line-delimited manifest under out_dir."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetError(f"output directory {out} is not empty (use force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    ordered = sorted(manifest.samples, key=lambda s: (s.modality, s.subject_id, s.slice_index))
    lines = []
    meta = {
        "record": "meta",
        "image_size": manifest.image_size,
        "source_hash": manifest.source_hash,
        "annotation_fraction": {m: manifest.annotation_fraction.get(m, 1.0) for m in MODALITIES},
        "n_samples": len(ordered),
    }
    lines.append(json.dumps(meta))
    for s in ordered:
        image_rel, mask_rel = _sample_rel_paths(s)
        image_path = out / image_rel
        image_path.parent.mkdir(parents=True, exist_ok=True)
        _image_to_png16(s.image).save(image_path)
        if mask_rel is not None:
            mask_path = out / mask_rel
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(mask_path)
        rec = {
            "record": "sample",
            "subject_id": s.subject_id,
            "modality": s.modality,
            "partition": s.partition,
            "domain": s.domain,
            "annotated": s.annotated,
            "slice_index": s.slice_index,
            "image": image_rel,
            "mask": mask_rel,
        }
        lines.append(json.dumps(rec))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return out / MANIFEST_NAME


def load_dataset(dataset_dir):
    """Load a dataset written by write_dataset back into memory."""
    root = Path(dataset_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    samples = []
    meta = None
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("record") == "meta":
            meta = rec
            continue
        image = _png16_to_image(root / rec["image"]).astype(np.float32)
        mask = None
        if rec["mask"] is not None:
            mask = (np.asarray(Image.open(root / rec["mask"])) > 127).astype(np.uint8)
        samples.append(
            SliceSample(
                image=image,
                modality=rec["modality"],
                domain=rec["domain"],
                mask=mask,
                annotated=bool(rec["annotated"]),
                subject_id=int(rec["subject_id"]),
                slice_index=int(rec["slice_index"]),
                partition=rec["partition"],
            )
        )
    if meta is None:
        raise DatasetError("manifest has no meta record")
    return DatasetManifest(
        samples=samples,
        image_size=int(meta["image_size"]),
        source_hash=meta.get("source_hash", ""),
        annotation_fraction={m: float(v) for m, v in meta["annotation_fraction"].items()},
    )
