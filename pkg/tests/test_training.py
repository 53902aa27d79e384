import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_seg import network as N
from fewshot_seg.data import Volume
from fewshot_seg.training import (
    DatasetError, LabelUniverse, SliceDataset, TrainHyperparams, TrainingDiverged,
    dice_loss, dice_loss_grad, sample_episode, sgd_step, train,
)


def toy_volumes(n=3, classes=(1, 2, 3), seed=0):
    """Tiny 16x16 volumes with one square blob per class on a few slices."""
    rng = np.random.default_rng(seed)
    vols = []
    for i in range(n):
        labels = np.zeros((6, 16, 16), np.uint8)
        for j, c in enumerate(classes):
            r, s = 2 + 4 * (j % 3), 2 + 6 * (j // 3)
            labels[1:5, r:r + 3, s:s + 4] = c
        img = (0.2 + 0.2 * labels + 0.02 * rng.standard_normal(labels.shape)).astype(np.float32)
        vols.append(Volume(img, labels=labels, volume_id=f"toy{i}"))
    return vols


# -- universe / sampler -----------------------------------------------------


def test_universe_disjoint():
    with pytest.raises(ValueError, match="disjoint"):
        LabelUniverse([1, 2], [2])
    u = LabelUniverse.leave_one_out([1, 2, 3, 4], 3)
    assert u.train_classes == {1, 2, 4} and u.test_classes == {3}
    with pytest.raises(ValueError, match="not in the catalog"):
        LabelUniverse.leave_one_out([1, 2], 5)


def test_binarization_of_label_map():
    labels = np.zeros((2, 4, 4), np.uint8)
    labels[:, 0, :2] = 2
    labels[:, 1, :] = 5
    ds = SliceDataset([Volume(np.zeros((2, 4, 4), np.float32), labels=labels)])
    _, mask = ds.slice(0, 0, 2)
    np.testing.assert_array_equal(mask, labels[0] == 2)
    assert mask.dtype == np.uint8


def test_episode_excludes_test_class_and_is_deterministic():
    ds = SliceDataset(toy_volumes())
    u = LabelUniverse([1, 3], [2])
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    for _ in range(50):
        e1, e2 = sample_episode(ds, u, r1), sample_episode(ds, u, r2)
        assert e1.class_id == e2.class_id and e1.class_id in (1, 3)
        np.testing.assert_array_equal(e1.query_image, e2.query_image)
        np.testing.assert_array_equal(e1.support_mask, e2.support_mask)
        assert e1.support_mask.any() and e1.query_mask.any()


def test_class_draw_uniform():
    ds = SliceDataset(toy_volumes(classes=(1, 2, 3, 4)))
    u = LabelUniverse([1, 2, 4], [3])
    rng = np.random.default_rng(0)
    draws = 10_000
    counts = {c: 0 for c in (1, 2, 4)}
    for _ in range(draws):
        counts[sample_episode(ds, u, rng).class_id] += 1
    p = 1 / 3
    sigma = np.sqrt(draws * p * (1 - p))
    for c, k in counts.items():
        assert abs(k - draws * p) <= 3 * sigma, counts


def test_sampler_needs_two_slices():
    labels = np.zeros((3, 4, 4), np.uint8)
    labels[1, 0, 0] = 1
    labels[:, 3, 3] = 2
    ds = SliceDataset([Volume(np.zeros((3, 4, 4), np.float32), labels=labels)])
    with pytest.raises(DatasetError, match="at least 2"):
        ds.validate(LabelUniverse([1, 2], [3]))
    with pytest.raises(DatasetError, match="no labels"):
        SliceDataset([Volume(np.zeros((3, 4, 4), np.float32))])


# -- dice loss ----------------------------------------------------------------


def test_dice_loss_values():
    m = np.array([1.0, 1, 0, 0])
    assert dice_loss(m, m) == pytest.approx(0.0, abs=1e-4)
    assert dice_loss(m, 1 - m) == pytest.approx(1.0, abs=1e-4)
    assert dice_loss(m, np.array([1.0, 0, 1, 0])) == pytest.approx(0.5, abs=1e-4)
    assert dice_loss(np.zeros(4), np.zeros(4)) == pytest.approx(0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31))
def test_dice_loss_bounded_and_gradient_shape(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random(n), (rng.random(n) > 0.5).astype(float)
    loss = dice_loss(p, t)
    assert -1e-9 <= loss <= 1
    assert dice_loss_grad(p, t).shape == p.shape


# -- SGD ----------------------------------------------------------------------


def test_sgd_hand_arithmetic():
    w = {"w": np.array([1.0])}
    state = {}
    sgd_step(w, {"w": np.array([1.0])}, state, TrainHyperparams())
    assert state["w"].item() == pytest.approx(1.0001, abs=1e-12)
    assert w["w"].item() == pytest.approx(0.989999, abs=1e-12)


def test_sgd_fixed_point_and_momentum_decay():
    hp = TrainHyperparams(weight_decay=0.0)
    w = {"w": np.array([2.0])}
    sgd_step(w, {"w": np.zeros(1)}, {}, hp)
    assert w["w"].item() == 2.0
    state = {"w": np.array([1.0])}
    sgd_step(w, {"w": np.zeros(1)}, state, hp)
    sgd_step(w, {"w": np.zeros(1)}, state, hp)
    assert state["w"].item() == pytest.approx(0.99**2)
    assert w["w"].item() == pytest.approx(2.0 - 0.01 * (0.99 + 0.99**2))


def test_hyperparams_defaults_and_validation():
    hp = TrainHyperparams()
    assert (hp.learning_rate, hp.weight_decay, hp.momentum, hp.epochs, hp.iters_per_epoch) == (0.01, 1e-4, 0.99, 10, 500)
    with pytest.raises(ValueError):
        TrainHyperparams(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainHyperparams(momentum=1.0)


# -- loop -----------------------------------------------------------------


CFG = N.preset("bl7", N.FewShotConfig(cond_channels=2, seg_channels=4, depth=2))


def test_curve_length_and_determinism():
    ds, u = SliceDataset(toy_volumes()), LabelUniverse([1, 2], [3])
    hp = TrainHyperparams(epochs=2, iters_per_epoch=3, seed=4)
    net1, c1 = train(ds, u, CFG, hp)
    net2, c2 = train(ds, u, CFG, hp)
    assert len(c1) == 6 and len(c1.epoch_means()) == 2
    assert c1.losses == c2.losses
    for k in net1.weights:
        np.testing.assert_array_equal(net1.weights[k], net2.weights[k])


def test_zero_learning_rate_leaves_weights():
    ds, u = SliceDataset(toy_volumes()), LabelUniverse([1, 2], [3])
    init = N.NetworkParams.init(CFG, seed=0)
    before = init.copy()
    net, _ = train(ds, u, CFG, TrainHyperparams(learning_rate=0.0, epochs=1, iters_per_epoch=4), net=init)
    for k in before.weights:
        np.testing.assert_array_equal(net.weights[k], before.weights[k])


def test_diverged_training_reports_iteration():
    ds, u = SliceDataset(toy_volumes()), LabelUniverse([1, 2], [3])
    net = N.NetworkParams.init(CFG, seed=0)
    net.weights["seg.classifier.bias"][:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(ds, u, CFG, TrainHyperparams(epochs=1, iters_per_epoch=2), net=net)
    assert info.value.iteration == 0


def test_toy_training_reduces_loss():
    ds, u = SliceDataset(toy_volumes()), LabelUniverse([1, 2], [3])
    _, curve = train(ds, u, CFG, TrainHyperparams(epochs=3, iters_per_epoch=30, seed=0))
    means = curve.epoch_means()
    assert means[-1] < means[0]


def test_loss_csv(tmp_path):
    ds, u = SliceDataset(toy_volumes()), LabelUniverse([1, 2], [3])
    _, curve = train(ds, u, CFG, TrainHyperparams(epochs=1, iters_per_epoch=2))
    curve.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,epoch,class_id,loss" and len(lines) == 3
