#!/usr/bin/env python3
"""End-to-end runs of the command-line driver on a tiny synthetic dataset."""

import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from cli import main
from hyperseg.codecs import read_tensor

TINY_NET = ["--channels", "4,4,8", "--refine-channels", "4", "--prototypes", "2",
            "--batch-size", "2", "--lr", "0.001", "--seed", "1"]


def read_rows(path: Path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = main(["synth", "--data-dir", str(root), "--train-count", "4", "--val-count", "2",
                 "--scene-size", "32", "--scene-radius", "3,6", "--seed", "1"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "train"
    code = main(["train", "--data-dir", str(data_dir), "--run-dir", str(run), "--epochs", "2",
                 "--pretrain-epochs", "1"] + TINY_NET)
    assert code == 0
    return run


def test_synth_layout(data_dir):
    for split, count in (("train", 4), ("val", 2)):
        rows = read_rows(data_dir / split / "manifest.csv")
        assert len(rows) == count and all(row["split"] == split for row in rows)
        assert (data_dir / split / "scene.json").is_file()


def test_train_writes_history_and_checkpoints(trained):
    rows = read_rows(trained / "metrics.csv")
    assert [row["phase"] for row in rows] == ["pretrain", "train", "train"]
    assert [row["epoch"] for row in rows] == ["1", "1", "2"]
    assert rows[-1]["split"] == "val" and rows[-1]["mIoU"]
    for leaf in ("pretrain", "epoch_001", "epoch_002"):
        assert (trained / "checkpoints" / leaf / "manifest.csv").is_file()
    assert (trained / "config.txt").read_text().startswith("temperature = 0.1\n")


def test_training_is_reproducible(data_dir, trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--data-dir", str(data_dir), "--run-dir", str(again), "--epochs", "2",
                 "--pretrain-epochs", "1"] + TINY_NET) == 0
    assert (again / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()


def test_resume_reproduces_uninterrupted_run(data_dir, trained, tmp_path):
    resumed = tmp_path / "resumed"
    checkpoint = trained / "checkpoints" / "epoch_001"
    assert main(["train", "--data-dir", str(data_dir), "--run-dir", str(resumed), "--epochs", "2",
                 "--pretrain-epochs", "1", "--resume", str(checkpoint)] + TINY_NET) == 0
    assert (resumed / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()


def test_full_ablation_row_matches_plain_training(data_dir, trained, tmp_path):
    run = tmp_path / "ablate"
    assert main(["ablate", "--experiments", "7", "--data-dir", str(data_dir), "--run-dir", str(run),
                 "--epochs", "2", "--pretrain-epochs", "1"] + TINY_NET) == 0
    assert (run / "ablation" / "exp_7" / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()
    row = read_rows(run / "ablation.csv")[0]
    assert row["experiment"] == "7" and row["uoic"] == "True"
    assert float(row["mIoU"]) == float(read_rows(trained / "metrics.csv")[-1]["mIoU"])


def test_eval_scores_checkpoint(data_dir, trained, tmp_path):
    run = tmp_path / "eval"
    assert main(["eval", "--data-dir", str(data_dir), "--run-dir", str(run),
                 "--checkpoint", str(trained / "checkpoints" / "epoch_002")] + TINY_NET) == 0
    row = read_rows(run / "metrics.csv")[0]
    assert row["phase"] == "eval"
    assert float(row["mIoU"]) == float(read_rows(trained / "metrics.csv")[-1]["mIoU"])


def test_eval_without_checkpoint_fails(data_dir, tmp_path, capsys):
    assert main(["eval", "--data-dir", str(data_dir), "--run-dir", str(tmp_path / "x")]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_missing_dataset_fails(tmp_path, capsys):
    assert main(["train", "--data-dir", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "r")]) == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_config_fails(data_dir, tmp_path):
    assert main(["train", "--data-dir", str(data_dir), "--run-dir", str(tmp_path / "r"),
                 "--temperature", "0"]) == 2


def test_augment_previews(data_dir, tmp_path):
    run = tmp_path / "aug"
    assert main(["augment", "--data-dir", str(data_dir), "--run-dir", str(run), "--count", "2"]) == 0
    rows = read_rows(run / "augment.csv")
    assert len(rows) == 2
    assert (run / "dumps" / "augment" / "train_00000_image.pgm").is_file()


def test_uncertainty_dumps(data_dir, trained, tmp_path):
    run = tmp_path / "unc"
    assert main(["dump-uncertainty", "--data-dir", str(data_dir), "--run-dir", str(run), "--count", "1",
                 "--debug-dumps", "true", "--checkpoint", str(trained / "checkpoints" / "epoch_002")]
                + TINY_NET) == 0
    out = run / "dumps" / "uncertainty"
    for tag in ("mhat", "u", "yhat"):
        assert (out / f"val_00000_{tag}.uhrt").is_file()
        assert (out / f"val_00000_{tag}.pgm").is_file()
    assert (out / "val_00000_scale0_S.uhrt").is_file()
    for scale, side in enumerate((32, 16, 8)):
        assert (out / f"val_00000_u{scale}.pgm").is_file()
        u = read_tensor(out / f"val_00000_u{scale}.uhrt")
        assert u.shape == (side, side)
        assert np.all((u >= 0.0) & (u <= 1.0))
    assert not (out / "val_00000_u3.uhrt").exists()


def test_embedding_dumps(data_dir, trained, tmp_path):
    run = tmp_path / "emb"
    assert main(["dump-embeddings", "--data-dir", str(data_dir), "--run-dir", str(run), "--count", "4",
                 "--checkpoint", str(trained / "checkpoints" / "pretrain")] + TINY_NET) == 0
    rows = read_rows(run / "dumps" / "embeddings.csv")
    assert rows and {row["source"] for row in rows} <= {"lesion_a", "lesion_b", "background_hard_negative"}
    summary = read_rows(run / "embedding_summary.csv")[0]
    assert set(summary) == {"pairs", "cos_a_b", "cos_a_bg", "small_area_cutoff"}
