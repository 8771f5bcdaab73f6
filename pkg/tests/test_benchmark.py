#!/usr/bin/env python3
"""Long run-based checks on the default synthetic benchmark.

These train full-size models for many epochs and are skipped unless
UHR_SLOW_TESTS=1 is set.
"""

import csv
import os
import statistics
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest

from cli import main

pytestmark = pytest.mark.skipif(os.environ.get("UHR_SLOW_TESTS") != "1",
                                reason="set UHR_SLOW_TESTS=1 to run long benchmarks")

MIOU_BAR = 0.80
ABLATION_TOLERANCE = 0.005
EMBEDDING_MARGIN = 0.1


def read_rows(path: Path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def val_rows(run: Path):
    return [row for row in read_rows(run / "metrics.csv") if row["split"] == "val"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    assert main(["synth", "--data-dir", str(root), "--train-count", "200", "--val-count", "50"]) == 0
    return root


def train(data_dir: Path, run: Path, *extra: str) -> Path:
    assert main(["train", "--data-dir", str(data_dir), "--run-dir", str(run)] + list(extra)) == 0
    return run


def test_full_model_reaches_miou_bar(data_dir, tmp_path):
    rows = val_rows(train(data_dir, tmp_path / "full"))
    assert len(rows) == 30
    assert float(rows[-1]["mIoU"]) > float(rows[0]["mIoU"])
    assert float(rows[-1]["mIoU"]) >= MIOU_BAR


def test_pretraining_loss_falls_over_first_epochs(data_dir, tmp_path):
    drops = []
    for seed in range(3):
        run = tmp_path / f"pre_{seed}"
        assert main(["pretrain", "--data-dir", str(data_dir), "--run-dir", str(run),
                     "--pretrain-epochs", "5", "--seed", str(seed)]) == 0
        losses = [float(row["loss"]) for row in read_rows(run / "metrics.csv")]
        drops.append(losses[-1] - losses[0])
    assert statistics.median(drops) < 0.0


def test_full_model_leads_single_component_ablations(data_dir, tmp_path):
    scores = {}
    for experiment in (3, 5, 6, 7):
        per_seed = []
        for seed in range(5):
            run = tmp_path / f"seed_{seed}"
            assert main(["ablate", "--experiments", str(experiment), "--data-dir", str(data_dir),
                         "--run-dir", str(run), "--seed", str(seed)]) == 0
            per_seed.append(float(read_rows(run / "ablation.csv")[0]["mIoU"]))
        scores[experiment] = statistics.median(per_seed)
    for experiment in (3, 5, 6):
        assert scores[experiment] <= scores[7] + ABLATION_TOLERANCE, scores


def test_pretrained_embeddings_separate_lesions_from_background(data_dir, tmp_path):
    run = tmp_path / "embed"
    assert main(["pretrain", "--data-dir", str(data_dir), "--run-dir", str(run)]) == 0
    assert main(["dump-embeddings", "--data-dir", str(data_dir), "--run-dir", str(run), "--count", "200",
                 "--checkpoint", str(run / "checkpoints" / "pretrain")]) == 0
    summary = read_rows(run / "embedding_summary.csv")[0]
    assert float(summary["cos_a_b"]) - float(summary["cos_a_bg"]) >= EMBEDDING_MARGIN
