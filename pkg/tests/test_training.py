#!/usr/bin/env python3
"""Network assembly, losses, metrics, optimiser, epochs and checkpoints."""

import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from services.ablation import PRESETS
from services.configuration import RunConfig
from hyperseg.errors import ConfigError, DatasetError, ShapeError
from hyperseg.layers import Parameter
from hyperseg.losses import bce_term, dice_term, seg_loss, train_loss
from hyperseg.net import NetworkSpec, SegmentationNet
from hyperseg.synthdata import SceneSpec, generate_split
from hyperseg.tensor_core import GradTape, Tensor, constant, spot_check
from hyperseg.training import (Adam, Metrics, TrainSettings, evaluate, fit, image_metrics, load_checkpoint,
                             mean_metrics, new_state, pretrain_epoch, restore_state, save_checkpoint,
                             train_epoch)
from hyperseg.ughr import BlockConfig

TINY = dict(scales=3, channels=(4, 4, 8), refine_channels=4)


def tiny_network(seed: int = 0, **block) -> SegmentationNet:
    spec = NetworkSpec(**TINY, block=BlockConfig(channels=4, prototypes=2, **block))
    return SegmentationNet(spec, seed=seed)


def tiny_dataset(split: str = "train", count: int = 4):
    scene = SceneSpec(size=16, lesions=(1, 1), radius=(3.0, 5.0), distractors=(0, 1), seed=3)
    return generate_split(scene, split, count)


def settings(**overrides) -> TrainSettings:
    return TrainSettings(**{"lr": 1e-3, "batch_size": 2, **overrides})


def params_equal(a: SegmentationNet, b: SegmentationNet) -> bool:
    left, right = a.state_dict(), b.state_dict()
    return left.keys() == right.keys() and all(np.array_equal(left[k], right[k]) for k in left)


# Network

def test_forward_shapes():
    out = tiny_network()(np.random.default_rng(0).random((1, 16, 16)), capture=True)
    assert out.y_hat.shape == (16, 16)
    assert out.m_hat.shape == (4, 4)
    assert out.m_hat_up.shape == (16, 16)
    assert [e.shape for e in out.refined] == [(4, 16, 16), (4, 8, 8), (4, 4, 4)]
    assert [f.shape for f in out.features] == [(4, 16, 16), (4, 8, 8), (8, 4, 4)]
    assert [c["S"].shape for c in out.captures] == [(256, 4), (64, 4), (16, 4)]


def test_prediction_is_one_half_at_init():
    out = tiny_network()(np.random.default_rng(1).random((1, 16, 16)))
    assert np.all(out.y_hat.data == 0.5)


def test_construction_is_deterministic():
    a, b = tiny_network(seed=4), tiny_network(seed=4)
    assert params_equal(a, b)
    image = np.random.default_rng(2).random((1, 16, 16))
    assert np.array_equal(a(image).m_hat.data, b(image).m_hat.data)
    assert not params_equal(a, tiny_network(seed=5))


def test_indivisible_input_asks_for_padding():
    with pytest.raises(ConfigError, match="pad"):
        tiny_network()(np.zeros((1, 18, 16)))
    with pytest.raises(ShapeError):
        tiny_network()(np.zeros((3, 16, 16)))


def test_network_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(scales=3, channels=(4, 8))
    with pytest.raises(ConfigError):
        NetworkSpec(scales=3, channels=(8, 4, 4))
    with pytest.raises(ConfigError):
        NetworkSpec(embed_scale=3)
    assert NetworkSpec().stride == 4


def test_pretrained_state_covers_encoder_and_guidance_only():
    source, target = tiny_network(seed=1), tiny_network(seed=2)
    state = source.pretrained_state()
    assert state and all(k.startswith(("encoder.", "guidance.")) for k in state)
    fresh = target.state_dict()
    target.load_pretrained(source.state_dict())
    own = target.state_dict()
    for name, value in source.state_dict().items():
        if name.startswith(("encoder.", "guidance.")):
            assert np.array_equal(own[name], value)
        else:
            assert np.array_equal(own[name], fresh[name])
    assert not params_equal(source, target)


# Losses

def test_uniform_half_prediction_losses():
    y_hat = Tensor(np.full((4, 4), 0.5))
    y = constant(np.zeros((4, 4)))
    assert abs(bce_term(y_hat, y).item() - math.log(2.0)) <= 1e-9
    assert abs(dice_term(y_hat, y).item() - (1.0 - 1.0 / 9.0)) <= 1e-12
    assert seg_loss(y_hat, np.zeros((4, 4))).item() == pytest.approx(math.log(2.0) + 8.0 / 9.0, abs=1e-9)


def test_perfect_prediction_has_near_zero_loss():
    y = np.zeros((4, 4))
    y[1:3, 1:3] = 1.0
    assert seg_loss(Tensor(y), y).item() < 1e-7


def test_train_loss_weights_auxiliary_term():
    rng = np.random.default_rng(3)
    y_hat, aux = Tensor(rng.uniform(0.1, 0.9, (8, 8))), Tensor(rng.uniform(0.1, 0.9, (8, 8)))
    y = (rng.random((8, 8)) < 0.3).astype(np.float64)
    main = seg_loss(y_hat, y).item()
    assert train_loss(y_hat, y, aux, 0.0).item() == main
    expected = main + 0.25 * seg_loss(aux, y).item()
    assert train_loss(y_hat, y, aux, 0.25).item() == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ShapeError):
        seg_loss(y_hat, np.zeros((4, 4)))


# Metrics

def test_metrics_hand_example():
    m = image_metrics(np.array([[0.9, 0.6], [0.1, 0.4]]), np.array([[1, 0], [1, 0]]))
    assert m.miou == pytest.approx(1.0 / 3.0)
    assert (m.mdsc, m.recall, m.precision) == (0.5, 0.5, 0.5)


def test_metrics_empty_cases():
    empty = np.zeros((3, 3))
    assert image_metrics(empty, empty) == Metrics(1.0, 1.0, 1.0, 1.0)
    assert image_metrics(np.full((3, 3), 0.9), empty) == Metrics(0.0, 0.0, 0.0, 0.0)
    gt = np.eye(3)
    missed = image_metrics(empty, gt)
    assert missed.precision == 0.0 and missed.miou == 0.0 and missed.recall == 0.0


def test_threshold_is_strict():
    assert image_metrics(np.full((2, 2), 0.5), np.ones((2, 2))).recall == 0.0


def test_dice_follows_from_iou():
    rng = np.random.default_rng(6)
    for _ in range(50):
        pred, gt = rng.random((8, 8)), (rng.random((8, 8)) < 0.4).astype(int)
        gt[0, 0] = 1
        m = image_metrics(pred, gt)
        assert m.mdsc == pytest.approx(2.0 * m.miou / (1.0 + m.miou), abs=1e-12)


def test_mean_metrics():
    mean = mean_metrics([Metrics(1.0, 1.0, 1.0, 1.0), Metrics(0.0, 0.5, 0.0, 0.5)])
    assert mean == Metrics(0.5, 0.75, 0.5, 0.75)
    assert mean_metrics([]) == Metrics()


# Optimiser

def test_adam_matches_reference_steps():
    param = Parameter(np.array([1.0]))
    adam = Adam(lr=0.1)
    grads = [1.0, -0.5, 2.0]
    value, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam.step([("w", param)], {"w": np.array([g])})
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * g * g
        value -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert param.data[0] == pytest.approx(value, abs=1e-15)
        if t == 1:
            assert param.data[0] == pytest.approx(0.9, abs=1e-8)
    assert adam.t == 3


def test_adam_skips_missing_and_rejects_bad_shapes():
    param = Parameter(np.ones(2))
    adam = Adam()
    adam.step([("w", param)], {})
    assert np.array_equal(param.data, np.ones(2))
    with pytest.raises(ShapeError):
        adam.step([("w", param)], {"w": np.ones(3)})


def test_end_to_end_gradient_spot_check():
    rng = np.random.default_rng(7)
    network = tiny_network(seed=7)
    for param in network.parameters():
        param.assign(param.data + rng.normal(0.0, 0.05, size=param.shape))
    image = rng.random((1, 16, 16))
    mask = np.zeros((16, 16))
    mask[4:9, 5:11] = 1.0
    params = network.parameters()

    def loss():
        out = network(image)
        return train_loss(out.y_hat, mask, out.m_hat_up, 0.1)

    with GradTape() as tape:
        value = loss()
    tape.backward(value, populate=False)
    candidates = []
    for index, param in enumerate(params):
        grad = tape.grad_of(param)
        for element in zip(*np.nonzero(np.abs(grad) > 1e-5)):
            candidates.append((index, tuple(int(e) for e in element)))
    picks = rng.choice(len(candidates), size=20, replace=False)
    coords = [candidates[i] for i in picks]
    assert spot_check(loss, params, coords) <= 1e-3


# Epochs

def test_train_epoch_is_finite_and_deterministic():
    data = tiny_dataset()
    rows = []
    networks = []
    for _ in range(2):
        state = new_state(tiny_network(seed=1), settings(), seed=9)
        rows.append(train_epoch(state, data, settings()))
        networks.append(state.network)
    assert math.isfinite(rows[0]["loss"])
    assert rows[0] == rows[1]
    assert params_equal(*networks)


def test_worker_count_does_not_change_the_result():
    data = tiny_dataset(count=5)
    serial = new_state(tiny_network(seed=2), settings(), seed=3)
    threaded = new_state(tiny_network(seed=2), settings(workers=3), seed=3)
    a = train_epoch(serial, data, settings())
    b = train_epoch(threaded, data, settings(workers=3))
    assert a == b
    assert params_equal(serial.network, threaded.network)


def test_pretrain_epoch_moves_only_pretrained_weights():
    data = tiny_dataset()
    network = tiny_network(seed=3)
    before = network.state_dict()
    state = new_state(network, settings(), seed=4)
    row = pretrain_epoch(state, data, settings())
    assert math.isfinite(row["loss"])
    for key in ("fallbacks", "skipped", "dropped_negatives", "nce_dropped"):
        assert row[key] >= 0
    after = network.state_dict()
    moved = {name for name in before if not np.array_equal(before[name], after[name])}
    assert moved and all(name.startswith(("encoder.", "guidance.")) for name in moved)


def test_pretrain_epoch_is_deterministic():
    data = tiny_dataset()
    states = [new_state(tiny_network(seed=3), settings(), seed=4) for _ in range(2)]
    rows = [pretrain_epoch(state, data, settings()) for state in states]
    assert rows[0]["loss"] == rows[1]["loss"]
    assert params_equal(states[0].network, states[1].network)


def test_empty_dataset_is_rejected():
    state = new_state(tiny_network(), settings(), seed=0)
    with pytest.raises(DatasetError):
        train_epoch(state, [], settings())


def test_evaluate_reports_metrics_and_loss():
    metrics, loss = evaluate(tiny_network(), tiny_dataset("val", 2))
    assert 0.0 <= metrics.miou <= 1.0
    assert math.isfinite(loss)


# Checkpoints

def test_resume_is_bit_identical(tmp_path):
    train, val = tiny_dataset(), tiny_dataset("val", 2)
    straight = fit(new_state(tiny_network(seed=5), settings(), seed=6), train, val, settings(), epochs=2)

    first = fit(new_state(tiny_network(seed=5), settings(), seed=6), train, val, settings(), epochs=1)
    save_checkpoint(first, tmp_path / "epoch_001", "seed = 6\n")
    resumed = new_state(tiny_network(seed=11), settings(), seed=0)
    restore_state(resumed, load_checkpoint(tmp_path / "epoch_001"))
    assert resumed.epoch == 1
    fit(resumed, train, val, settings(), epochs=2)

    assert params_equal(straight.network, resumed.network)
    assert straight.history == resumed.history
    assert straight.optimizer.t == resumed.optimizer.t


def test_checkpoint_layout(tmp_path):
    state = new_state(tiny_network(), settings(), seed=0)
    save_checkpoint(state, tmp_path, "lr = 0.001\n")
    header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert header == "name,shape,role,file"
    assert (tmp_path / "param").is_dir() and (tmp_path / "state.json").is_file()
    loaded = load_checkpoint(tmp_path)
    assert loaded.meta["config"] == "lr = 0.001\n"
    assert set(loaded.params) == set(state.network.state_dict())


def test_missing_checkpoint_tensor(tmp_path):
    save_checkpoint(new_state(tiny_network(), settings(), seed=0), tmp_path)
    next((tmp_path / "param").iterdir()).unlink()
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path)


# Ablation variants

def test_ablation_parameter_counts():
    counts = {}
    for preset in PRESETS:
        config = preset.apply(RunConfig(channels="4,4,8", refine_channels=4, prototypes=2))
        spec = config.network_spec()
        counts[preset.experiment] = SegmentationNet(spec).num_parameters()
    assert counts[1] == counts[2]
    assert counts[3] == counts[5]
    assert counts[4] == counts[6] == counts[7]
    assert counts[3] < counts[4]
    # conv stand-in matches the shared hypergraph branch to one hidden filter per block
    one_filter = 10 * 4 + 1
    assert counts[1] == pytest.approx(counts[3], abs=spec.scales * one_filter)


def test_perfect_prediction_scores_one():
    gt = np.zeros((4, 4))
    gt[1:3, 0:2] = 1
    assert image_metrics(gt, gt) == Metrics(1.0, 1.0, 1.0, 1.0)


def test_losses_are_never_negative():
    rng = np.random.default_rng(12)
    for _ in range(30):
        y_hat, aux = Tensor(rng.random((6, 6))), Tensor(rng.random((6, 6)))
        y = (rng.random((6, 6)) < rng.random()).astype(np.float64)
        assert seg_loss(y_hat, y).item() >= 0.0
        assert train_loss(y_hat, y, aux, 0.1).item() >= 0.0
