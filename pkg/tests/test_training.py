import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import contrastive_scalar
from sint.datagen import PairSamplerConfig, build_pair_dataset, generate_suite
from sint.nnet import SgdConfig
from sint.siamese import build_model, copy_model, to_tensor
from sint.training import (TrainingConfig, contrastive_loss, contrastive_loss_grad, dataset_loss, train,
                           train_step)


def test_loss_examples():
    assert contrastive_loss(0.0, 1) == 0.0
    assert contrastive_loss(1.0, 0, 1.0) == 0.0
    assert contrastive_loss(1.5, 0, 1.0) == 0.0
    assert contrastive_loss(0.5, 0, 1.0) == 0.375


@given(st.floats(0, 3), st.sampled_from([0, 1]), st.floats(0.1, 4))
def test_loss_matches_scalar_oracle(d, y, eps):
    assert contrastive_loss(d, y, eps) == pytest.approx(contrastive_scalar(d, y, eps), abs=1e-12)
    assert contrastive_loss(d, y, eps) >= 0


def test_loss_gradient_finite_difference(rng):
    a, b = rng.normal(size=(6, 5)) * 0.3, rng.normal(size=(6, 5)) * 0.3
    y = np.array([1, 0, 1, 0, 0, 1])
    ga, gb = contrastive_loss_grad(a, b, y, 1.0)

    def total(a_, b_):
        return np.sum(contrastive_loss(np.linalg.norm(a_ - b_, axis=1), y, 1.0))

    num = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += 1e-6
        am[idx] -= 1e-6
        num[idx] = (total(ap, b) - total(am, b)) / 2e-6
    assert np.max(np.abs(ga - num)) / np.max(np.abs(num)) < 1e-4
    np.testing.assert_array_equal(gb, -ga)


def test_negative_beyond_margin_has_zero_gradient():
    ga, gb = contrastive_loss_grad(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]), np.array([0]), 1.0)
    assert np.all(ga == 0) and np.all(gb == 0)


@pytest.fixture(scope="module")
def tiny_pairs():
    cfg = PairSamplerConfig(pairs_per_frame_pair=32)
    train_seqs = generate_suite(4, 0, length=8)
    val_seqs = generate_suite(2, 100, length=8)
    return build_pair_dataset(train_seqs, 3, cfg, seed=0), build_pair_dataset(val_seqs, 2, cfg, seed=1)


def test_train_step_reduces_batch_loss(tiny_pairs):
    model = build_model(seed=0)
    batch = tiny_pairs[0][:2]
    cfg = TrainingConfig(sgd=SgdConfig(learning_rate=0.05, lr_decay_every=100))
    before = dataset_loss(model, batch)
    train_step(model, batch, cfg, 0)
    assert dataset_loss(model, batch) < before


def test_train_report_and_best_weights(tiny_pairs):
    train_pairs, val_pairs = tiny_pairs
    model = build_model(seed=0)
    cfg = TrainingConfig(sgd=SgdConfig(learning_rate=0.05, lr_decay_every=100), max_epochs=2)
    model, report = train(model, train_pairs, val_pairs, cfg)
    assert [r.epoch for r in report.records] == [0, 1, 2]
    assert report.stop_reason in ("max-epochs", "validation-plateau")
    assert dataset_loss(model, val_pairs) == pytest.approx(report.best_val_loss, rel=1e-12)
    assert report.best_val_loss == min(report.val_losses)


def test_patience_stops_training(tiny_pairs):
    train_pairs, val_pairs = tiny_pairs
    # a huge step wrecks the model, so validation never improves on the initial weights
    cfg = TrainingConfig(sgd=SgdConfig(learning_rate=50.0, lr_decay_every=100), max_epochs=6, patience=2)
    model = build_model(seed=0)
    initial = copy_model(model)
    try:
        model, report = train(model, train_pairs, val_pairs, cfg)
    except FloatingPointError:
        return
    if report.best_epoch == 0:
        assert report.stop_reason == "validation-plateau"
        assert len(report.records) == 3
        for pa, pb in zip(model.params(), initial.params()):
            np.testing.assert_array_equal(pa.value, pb.value)


def test_training_is_deterministic(tiny_pairs):
    train_pairs, val_pairs = tiny_pairs
    cfg = TrainingConfig(sgd=SgdConfig(learning_rate=0.05), max_epochs=1, seed=3)
    a, ra = train(build_model(seed=1), train_pairs[:4], val_pairs[:2], cfg)
    b, rb = train(build_model(seed=1), train_pairs[:4], val_pairs[:2], cfg)
    assert ra.val_losses == rb.val_losses
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_report_csv(tmp_path, tiny_pairs):
    _, report = train(build_model(seed=0), tiny_pairs[0][:2], tiny_pairs[1][:1],
                      TrainingConfig(max_epochs=1))
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(epsilon=0)
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=-1)
