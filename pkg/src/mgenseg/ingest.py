"""Adapter for externally supplied 3D volume datasets (BraTS-style layout).

Converts per-subject volumes plus segmentation labels into the same slice
manifest the synthetic generator produces: hemispheres split along the
sagittal axis, axial 2D slices extracted, weak labels assigned by lesion
area, intensities rescaled per volume, one modality per subject.

Volumes are read/written as NIfTI-1 (.nii / .nii.gz) with a self-contained
minimal codec; in-memory volumes are indexed (z, y, x).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import IngestConfig
from .data import DatasetManifest, SliceSample
from .synth import slice_disposition

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


class IngestError(ValueError):
    pass


@dataclass
class VolumeRecord:
    """One contrast sequence of one subject, with its segmentation labels."""

    subject_id: int
    sequence: str
    volume: np.ndarray  # (z, y, x)
    segmentation: np.ndarray  # (z, y, x) integer labels

    def validate(self):
        if self.volume.shape != self.segmentation.shape:
            raise IngestError(
                f"subject {self.subject_id} {self.sequence}: volume/segmentation shape mismatch"
            )


# --------------------------------------------------------------------------
# Minimal NIfTI-1 codec (single-file .nii, optionally gzipped)


def read_nifti(path):
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 352:
        raise IngestError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise IngestError(f"{path}: unsupported NIfTI header (sizeof_hdr={sizeof_hdr})")
    dim = struct.unpack_from("<8h", raw, 40)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    ndim = dim[0]
    if ndim < 2 or ndim > 4:
        raise IngestError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if datatype not in _NIFTI_DTYPES:
        raise IngestError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = _NIFTI_DTYPES[datatype]
    offset = int(vox_offset) if vox_offset else 352
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"), count=count, offset=offset)
    arr = data.reshape(shape, order="F").astype(np.float64 if dtype != np.uint8 else np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter
    if ndim == 4:
        arr = arr[..., 0]
    # file order is (x, y, z); present as (z, y, x)
    return np.ascontiguousarray(arr.transpose(2, 1, 0))


def write_nifti(path, volume_zyx, dtype=np.float32):
    path = Path(path)
    vol = np.asarray(volume_zyx)
    data = vol.transpose(2, 1, 0).astype(dtype)  # back to (x, y, z)
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    dims = (3,) + data.shape + (1,) * (7 - 3)
    struct.pack_into("<8h", header, 40, *dims)
    code = {np.float32: 16, np.float64: 64, np.int16: 4, np.uint8: 2}[dtype]
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    payload = bytes(header) + data.tobytes(order="F")
    if path.name.endswith(".gz"):
        with open(path, "wb") as raw:
            # filename="" and mtime=0 keep the archive byte-deterministic
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


# --------------------------------------------------------------------------
# Preprocessing operations


def split_hemispheres(volume):
    """Split along the sagittal (last) axis; the middle column goes left when
    the width is odd. Concatenating the halves reproduces the input."""
    width = volume.shape[-1]
    if width < 2:
        raise IngestError("volume too narrow to split")
    cut = (width + 1) // 2
    return volume[..., :cut], volume[..., cut:]


def rescale_volume(volume, floor=0.02):
    """Min-max rescale over nonzero voxels to [floor, 1]; background stays 0."""
    nz = volume[volume > 0]
    if nz.size == 0:
        raise IngestError("all-zero volume")
    mn, mx = float(nz.min()), float(nz.max())
    if mx > mn:
        scaled = floor + (volume - mn) / (mx - mn) * (1.0 - floor)
    else:
        scaled = np.full_like(volume, 1.0, dtype=np.float64)
    return np.where(volume > 0, np.clip(scaled, floor, 1.0), 0.0).astype(np.float32)


def extract_slices(volume, segmentation, threshold, modality="S", subject_id=0, slice_offset=0):
    """Axial slices with weak labels; sub-threshold-but-nonzero tumor slices
    and empty-foreground slices are dropped. Intensities are rescaled per
    volume before slicing."""
    if volume.shape != segmentation.shape:
        raise IngestError("volume and segmentation shapes differ")
    if not (volume > 0).any():
        raise IngestError("all-zero volume")
    scaled = rescale_volume(volume)
    tumor = (segmentation > 0).astype(np.uint8)
    samples = []
    for z in range(volume.shape[0]):
        fg = volume[z] > 0
        if not fg.any():
            continue
        disposition = slice_disposition(tumor[z], fg, threshold)
        if disposition == "exclude":
            continue
        samples.append(
            SliceSample(
                image=scaled[z],
                modality=modality,
                domain=disposition,
                mask=tumor[z] if disposition == "P" else None,
                annotated=disposition == "P",
                subject_id=subject_id,
                slice_index=slice_offset + z,
            )
        )
    return samples


def assign_modalities(records, source, target, seed, threshold=0.01):
    """Build an unpaired manifest: each subject contributes exactly one
    modality, subjects split into train/val/test with the 295/37/37
    proportions."""
    by_subject = {}
    for rec in records:
        rec.validate()
        by_subject.setdefault(rec.subject_id, {})[rec.sequence] = rec
    subject_ids = sorted(by_subject)
    for sid in subject_ids:
        for seq in (source, target):
            if seq not in by_subject[sid]:
                raise IngestError(f"subject {sid}: missing sequence {seq!r}")

    n = len(subject_ids)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A6]))
    order = rng.permutation(n)
    n_val = max(1, int(round(n * 37 / 369)))
    n_test = max(1, int(round(n * 37 / 369)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise IngestError(f"too few subjects ({n}) to populate all partitions")

    samples = []
    for rank, idx in enumerate(order):
        sid = subject_ids[int(idx)]
        if rank < n_train:
            partition = "train"
        elif rank < n_train + n_val:
            partition = "val"
        else:
            partition = "test"
        # alternate modalities within the shuffled order: random but balanced
        modality = "S" if rank % 2 == 0 else "T"
        sequence = source if modality == "S" else target
        rec = by_subject[sid][sequence]
        vol_halves = split_hemispheres(rec.volume)
        seg_halves = split_hemispheres(rec.segmentation)
        offset = 0
        for vol_h, seg_h in zip(vol_halves, seg_halves):
            if not (vol_h > 0).any():
                offset += vol_h.shape[0]
                continue
            part_samples = extract_slices(
                vol_h,
                seg_h,
                threshold,
                modality=modality,
                subject_id=sid,
                slice_offset=offset,
            )
            offset += vol_h.shape[0]
            for s in part_samples:
                s.partition = partition
                samples.append(s)

    if not samples:
        raise IngestError("no usable slices extracted")
    image_size = samples[0].image.shape[0]
    manifest = DatasetManifest(samples=samples, image_size=image_size)
    manifest.validate()
    return manifest


def convert_directory(root, config: IngestConfig):
    """Scan <root>/<subject>/ for *_<sequence>.nii[.gz] plus *_seg.nii[.gz]
    and convert to a slice manifest."""
    root = Path(root)
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subject_dirs:
        raise IngestError(f"no subject directories under {root}")
    records = []
    for sid, subject_dir in enumerate(subject_dirs):
        seg_path = _find_volume(subject_dir, "seg")
        seg = np.round(read_nifti(seg_path)).astype(np.int32)
        for seq in (config.source_sequence, config.target_sequence):
            vol_path = _find_volume(subject_dir, seq)
            records.append(
                VolumeRecord(
                    subject_id=sid,
                    sequence=seq,
                    volume=read_nifti(vol_path),
                    segmentation=seg,
                )
            )
    return assign_modalities(
        records,
        config.source_sequence,
        config.target_sequence,
        config.seed,
        threshold=config.diseased_threshold,
    )


def _find_volume(subject_dir, suffix):
    for ext in (".nii.gz", ".nii"):
        matches = sorted(subject_dir.glob(f"*_{suffix}{ext}"))
        if matches:
            return matches[0]
    raise IngestError(f"{subject_dir}: missing sequence file *_{suffix}.nii[.gz]")
