"""End-to-end command-line behavior on a miniature dataset."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mgenseg.cli import main

BASE_CONFIG = """
[synth]
image_size = 32
n_subjects_per_modality = 12
slices_per_subject = 2
seed = 4

[model]
base_width = 8
n_down = 2
latent_channels = 32
unique_channels = 8

[training]
epochs = 1
batch_size = 4
steps_per_epoch = 2
learning_rate = 0.001
seeds = 0
"""


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(BASE_CONFIG)
    return path


@pytest.fixture()
def dataset_dir(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["synth", "--config", str(config_file), "--out", str(out)]) == 0
    return out


def test_synth_idempotent_and_force(tmp_path, config_file, capsys):
    out = tmp_path / "ds"
    assert main(["synth", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "manifest.jsonl").exists()
    assert (out / "run.json").exists()
    assert (out / "config.snapshot.ini").exists()
    # refuses to clobber without --force
    assert main(["synth", "--config", str(config_file), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "force" in err
    assert main(["synth", "--config", str(config_file), "--out", str(out), "--force"]) == 0


def test_synth_byte_identical(tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", str(config_file), "--out", str(a)]) == 0
    assert main(["synth", "--config", str(config_file), "--out", str(b)]) == 0
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()


def test_missing_config_key_named(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[synth]\nimage_size = 32\n\n[training]\nepochs = 1\n")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "synth.n_subjects_per_modality" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(BASE_CONFIG.replace("seed = 4", "seed = 4\nbogus_key = 3"))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "bogus_key" in capsys.readouterr().err

    path.write_text(BASE_CONFIG + "\n[mystery]\nx = 1\n")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "mystery" in capsys.readouterr().err


def test_train_and_eval_roundtrip(tmp_path, config_file, dataset_dir, capsys):
    out = tmp_path / "run"
    assert main([
        "train", "--config", str(config_file), "--data", str(dataset_dir),
        "--out", str(out), "--quiet",
    ]) == 0
    assert (out / "seed0" / "best.pt").exists()
    assert (out / "seed0" / "metrics.jsonl").exists()
    assert (out / "results.csv").exists()

    # refuses to clobber, resumes instead
    assert main([
        "train", "--config", str(config_file), "--data", str(dataset_dir),
        "--out", str(out), "--quiet",
    ]) == 2
    assert main([
        "train", "--config", str(config_file), "--data", str(dataset_dir),
        "--out", str(out), "--quiet", "--resume",
    ]) == 0

    evo = tmp_path / "evalout"
    assert main([
        "eval", "--config", str(config_file), "--data", str(dataset_dir),
        "--checkpoint", str(out / "seed0" / "best.pt"), "--out", str(evo), "--quiet",
    ]) == 0
    payload = json.loads((evo / "eval.json").read_text())
    assert payload["partition"] == "test"
    assert (evo / "eval.csv").exists()


def test_eval_guards(tmp_path, config_file, dataset_dir, capsys):
    code = main([
        "eval", "--config", str(config_file), "--data", str(dataset_dir),
        "--checkpoint", str(tmp_path / "nope.pt"), "--out", str(tmp_path / "e"),
        "--partition", "train", "--quiet",
    ])
    assert code == 2
    assert "allow-train" in capsys.readouterr().err

    code = main([
        "eval", "--config", str(config_file), "--data", str(dataset_dir),
        "--checkpoint", str(tmp_path / "nope.pt"), "--out", str(tmp_path / "e"),
        "--partition", "train", "--allow-train", "--quiet",
    ])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_train_rejects_mismatched_dataset(tmp_path, config_file, dataset_dir, capsys):
    other = tmp_path / "other.ini"
    other.write_text(BASE_CONFIG.replace("seed = 4", "seed = 5"))
    code = main([
        "train", "--config", str(other), "--data", str(dataset_dir),
        "--out", str(tmp_path / "r"), "--quiet",
    ])
    assert code == 2
    assert "different" in capsys.readouterr().err


def test_ablate_requires_tag(tmp_path, config_file, dataset_dir, capsys):
    code = main([
        "ablate", "--config", str(config_file), "--data", str(dataset_dir),
        "--out", str(tmp_path / "a"), "--quiet",
    ])
    assert code == 2

    assert main([
        "ablate", "--config", str(config_file), "--data", str(dataset_dir),
        "--out", str(tmp_path / "a"), "--ablation", "no_image_level", "--quiet",
    ]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "results.csv").open()))
    assert rows[0]["ablation"] == "no_image_level"


def test_matrix_and_report(tmp_path, dataset_dir):
    cfg = tmp_path / "matrix.ini"
    cfg.write_text(BASE_CONFIG + "\n[eval]\nmatrix_source_fractions = 0.5, 1.0\n")
    out = tmp_path / "matrix"
    assert main([
        "matrix", "--config", str(cfg), "--data", str(dataset_dir),
        "--out", str(out), "--quiet",
    ]) == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert len(rows) == 2  # two fractions x one seed
    assert len({r["config_hash"] for r in rows}) == 2
    assert (out / "dice_vs_fraction.csv").exists()

    # the matrix resumes: a second invocation reuses persisted results
    assert main([
        "matrix", "--config", str(cfg), "--data", str(dataset_dir),
        "--out", str(out), "--quiet",
    ]) == 0

    assert main(["report", "--out", str(out), "--quiet"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_configs"] == 2
    assert (out / "aggregate.csv").exists()


def test_report_requires_results(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path), "--quiet"]) == 2
    assert "results.csv" in capsys.readouterr().err


def test_ingest_cli(tmp_path, config_file):
    from mgenseg.ingest import write_nifti

    src = tmp_path / "volumes"
    rng = np.random.default_rng(0)
    for sid in range(8):
        sub = src / f"sub{sid:03d}"
        sub.mkdir(parents=True)
        vol = np.zeros((3, 8, 16))
        vol[:, 1:7, 2:14] = 60 + 20 * rng.random((3, 6, 12))
        seg = np.zeros((3, 8, 16), dtype=np.int32)
        seg[1, 3:5, 4:8] = 1
        write_nifti(sub / f"sub{sid:03d}_t1.nii.gz", vol)
        write_nifti(sub / f"sub{sid:03d}_t2.nii.gz", vol * 0.5)
        write_nifti(sub / f"sub{sid:03d}_seg.nii.gz", seg.astype(np.float32))
    out = tmp_path / "ingested"
    assert main([
        "ingest", "--config", str(config_file), "--input", str(src), "--out", str(out),
    ]) == 0
    assert (out / "manifest.jsonl").exists()


def test_data_root_env(tmp_path, config_file, monkeypatch):
    root = tmp_path / "root"
    out_rel = "nested/ds"
    monkeypatch.setenv("MGENSEG_DATA_ROOT", str(root))
    assert main(["synth", "--config", str(config_file), "--out", out_rel]) == 0
    assert (root / out_rel / "manifest.jsonl").exists()
