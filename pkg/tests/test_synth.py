"""Generator determinism, labeling rules, and dataset invariants."""

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from mgenseg.config import ConfigError, StyleParams, SynthConfig
from mgenseg.data import load_dataset, mask_annotations, write_dataset
from mgenseg.synth import (
    apply_modality_style,
    build_dataset,
    foreground_of,
    generate_phantom,
    implant_lesion,
    label_domain,
    slice_disposition,
    style_gap,
)

SMALL = SynthConfig(image_size=32, n_subjects_per_modality=20, slices_per_subject=2, seed=5)


def test_phantom_deterministic():
    a = generate_phantom(7, SMALL)
    b = generate_phantom(7, SMALL)
    np.testing.assert_array_equal(a, b)


def test_phantom_range_and_foreground():
    p = generate_phantom(3, SMALL)
    assert p.min() >= 0.0 and p.max() <= 1.0
    fg = foreground_of(p)
    assert 0.1 < fg.mean() < 0.9
    assert p[~fg].max() == 0.0


def test_phantom_seeds_differ():
    a = generate_phantom(7, SMALL)
    b = generate_phantom(8, SMALL)
    assert np.abs(a - b).max() > 0.0


def test_phantom_rejects_tiny_size():
    with pytest.raises(ConfigError):
        generate_phantom(0, SynthConfig(image_size=8, n_subjects_per_modality=20))


def test_implant_no_lesion_when_probability_zero():
    cfg = SynthConfig(image_size=32, n_subjects_per_modality=20, lesion_probability=0.0)
    p = generate_phantom(1, cfg)
    img, mask = implant_lesion(p, 9, cfg)
    assert mask.sum() == 0
    np.testing.assert_array_equal(img, p)


def test_implant_mask_contained_in_foreground():
    p = generate_phantom(2, SMALL)
    img, mask = implant_lesion(p, 4, SMALL, force=True)
    fg = foreground_of(p)
    np.testing.assert_array_equal(mask & fg, mask)
    assert mask.sum() > 0
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_implant_deterministic():
    p = generate_phantom(2, SMALL)
    a = implant_lesion(p, 4, SMALL)
    b = implant_lesion(p, 4, SMALL)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_implant_changes_only_lesion_neighborhood():
    p = generate_phantom(6, SMALL)
    img, mask = implant_lesion(p, 11, SMALL, force=True)
    diff = img != p
    neighborhood = binary_dilation(mask.astype(bool), iterations=6)
    assert diff[~neighborhood].sum() == 0
    assert diff[mask.astype(bool)].any()


def test_style_identity():
    cfg = SynthConfig(
        image_size=32,
        n_subjects_per_modality=20,
        style_s=StyleParams(),
        style_t=StyleParams(),
    )
    p = generate_phantom(0, cfg)
    np.testing.assert_array_equal(apply_modality_style(p, "S", cfg), p)


def test_style_pure_inversion():
    cfg = SynthConfig(
        image_size=32,
        n_subjects_per_modality=20,
        style_t=StyleParams(invert=True),
    )
    img = np.full((4, 4), 0.3, dtype=np.float32)
    out = apply_modality_style(img, "T", cfg)
    assert out[0, 0] == pytest.approx(0.7, abs=1e-6)


def test_style_unknown_modality():
    with pytest.raises(ConfigError):
        apply_modality_style(np.zeros((4, 4)), "X", SMALL)


def test_style_gap_exceeds_minimum():
    # appearance gap between the default styles over 100 phantoms
    cfg = SynthConfig(seed=0)
    gap = style_gap(cfg, n_phantoms=100)
    assert gap > cfg.min_style_gap


def test_label_domain_rules():
    fg = np.ones((100, 100), dtype=bool)
    empty = np.zeros((100, 100), dtype=np.uint8)
    assert label_domain(empty, fg, 0.01) == "A"
    mask = np.zeros_like(empty)
    mask.flat[:200] = 1  # 200 / 10000 = 0.02 >= 0.01
    assert label_domain(mask, fg, 0.01) == "P"
    small = np.zeros_like(empty)
    small.flat[:50] = 1  # 0.005 < 0.01: excluded from datasets
    assert label_domain(small, fg, 0.01) == "A"
    assert slice_disposition(small, fg, 0.01) == "exclude"


def test_label_domain_errors():
    with pytest.raises(ValueError):
        label_domain(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool), 0.01)
    with pytest.raises(ValueError):
        label_domain(np.zeros((4, 4)), np.ones((5, 5), dtype=bool), 0.01)


def test_build_dataset_split_and_unpairedness():
    cfg = SynthConfig(image_size=32, n_subjects_per_modality=100, slices_per_subject=1, seed=2)
    manifest = build_dataset(cfg)
    for modality in ("S", "T"):
        train = set(manifest.subjects(modality=modality, partition="train"))
        val = set(manifest.subjects(modality=modality, partition="val"))
        test = set(manifest.subjects(modality=modality, partition="test"))
        assert (len(train), len(val), len(test)) == (80, 10, 10)
        assert not (train & val or train & test or val & test)
    assert not set(manifest.subjects(modality="S")) & set(manifest.subjects(modality="T"))


def test_build_dataset_deterministic():
    a = build_dataset(SMALL)
    b = build_dataset(SMALL)
    assert len(a.samples) == len(b.samples)
    for sa, sb in zip(a.samples, b.samples):
        np.testing.assert_array_equal(sa.image, sb.image)
        assert (sa.domain, sa.partition, sa.subject_id) == (sb.domain, sb.partition, sb.subject_id)


def test_build_dataset_label_soundness():
    manifest = build_dataset(SMALL)
    for s in manifest.samples[:40]:
        fg = s.image > 0
        mask = s.mask if s.mask is not None else np.zeros_like(s.image, dtype=np.uint8)
        assert label_domain(mask, fg, SMALL.diseased_threshold) == s.domain


def test_build_dataset_every_cell_populated():
    manifest = build_dataset(SMALL)
    counts = manifest.counts()
    for part in ("train", "val", "test"):
        for m in ("S", "T"):
            for d in ("A", "P"):
                assert counts.get((part, m, d), 0) >= 1


def _fake_manifest(n_diseased_subjects):
    from mgenseg.data import DatasetManifest, SliceSample

    img = np.full((4, 4), 0.5, dtype=np.float32)
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[1, 1] = 1
    samples = [
        SliceSample(
            image=img,
            modality="S",
            domain="P",
            mask=mask,
            annotated=True,
            subject_id=i,
            partition="train",
        )
        for i in range(n_diseased_subjects)
    ]
    return DatasetManifest(samples=samples, image_size=4)


def test_mask_annotations_all_or_none():
    m = _fake_manifest(10)
    all_on = mask_annotations(m, 1.0, seed=1, modality="S")
    assert all(s.annotated for s in all_on.samples)
    none = mask_annotations(m, 0.0, seed=1, modality="S")
    assert not any(s.annotated for s in none.samples)


def test_mask_annotations_ceiling_on_subjects():
    # ceil(0.4 * 295) = 118 annotated subjects
    m = _fake_manifest(295)
    masked = mask_annotations(m, 0.4, seed=7, modality="S")
    annotated_subjects = {s.subject_id for s in masked.samples if s.annotated}
    assert len(annotated_subjects) == 118
    assert masked.annotation_fraction["S"] == 0.4


def test_mask_annotations_selects_whole_subjects():
    from mgenseg.data import DatasetManifest, SliceSample

    img = np.full((4, 4), 0.5, dtype=np.float32)
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[0, 0] = 1
    samples = []
    for sid in range(6):
        for k in range(3):
            samples.append(
                SliceSample(img, "S", "P", mask, True, subject_id=sid, slice_index=k, partition="train")
            )
    manifest = DatasetManifest(samples=samples, image_size=4)
    masked = mask_annotations(manifest, 0.5, seed=0, modality="S")
    by_subject = {}
    for s in masked.samples:
        by_subject.setdefault(s.subject_id, set()).add(s.annotated)
    assert all(len(flags) == 1 for flags in by_subject.values())
    assert sum(1 for flags in by_subject.values() if flags == {True}) == 3


def test_mask_annotations_leaves_val_test_untouched(tmp_path):
    manifest = build_dataset(SMALL)
    masked = mask_annotations(manifest, 0.0, seed=3, modality="S")
    for before, after in zip(manifest.samples, masked.samples):
        if before.partition != "train" or before.modality != "S":
            assert before.annotated == after.annotated


def test_write_load_round_trip(tmp_path):
    manifest = build_dataset(SMALL)
    write_dataset(manifest, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    loaded.validate()
    assert len(loaded.samples) == len(manifest.samples)
    by_key = {(s.modality, s.subject_id, s.slice_index): s for s in manifest.samples}
    for s in loaded.samples:
        orig = by_key[(s.modality, s.subject_id, s.slice_index)]
        assert np.abs(s.image - orig.image).max() < 1e-4  # 16-bit quantization
        assert s.domain == orig.domain and s.annotated == orig.annotated
        if orig.mask is not None:
            np.testing.assert_array_equal(s.mask, orig.mask)


def test_write_dataset_byte_identical(tmp_path):
    manifest = build_dataset(SMALL)
    write_dataset(manifest, tmp_path / "a")
    write_dataset(manifest, tmp_path / "b")
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert a == b
    sample_png = next((tmp_path / "a").glob("images/S/train/*.png"))
    twin = tmp_path / "b" / sample_png.relative_to(tmp_path / "a")
    assert sample_png.read_bytes() == twin.read_bytes()


def test_write_dataset_refuses_nonempty(tmp_path):
    manifest = build_dataset(SMALL)
    write_dataset(manifest, tmp_path / "ds")
    from mgenseg.data import DatasetError

    with pytest.raises(DatasetError):
        write_dataset(manifest, tmp_path / "ds")
    write_dataset(manifest, tmp_path / "ds", force=True)
