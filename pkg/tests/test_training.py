"""Tests for datasets, the constrained objective, Adam, training and label hiding."""

from __future__ import annotations

import math

import numpy as np
import pytest

from shield.errors import BadConfig, BadPercent, DimensionMismatch, EmptyBatch
from shield.metrics import UNKNOWN
from shield.net import init_model, predict_outputs
from shield.training import (
    LAMBDA_F1_TOLERANCE,
    LAMBDA_GRID,
    Adam,
    Dataset,
    Split,
    TrainConfig,
    make_semisupervised,
    read_dataset_csv,
    select_lambda,
    supervised_loss,
    total_batch_loss,
    train,
    write_dataset_csv,
    write_history_csv,
)

U = UNKNOWN


def _objective(model, batch, bound, config):
    total, _ = total_batch_loss(model, batch, bound, config)
    return total


def test_supervised_loss_skips_unknown_entries():
    assert supervised_loss([0.9, 0.2], [1, U]) == pytest.approx(-math.log(0.9))
    assert supervised_loss([0.9, 0.2], [1, 0]) == pytest.approx(
        -(math.log(0.9) + math.log(0.8)) / 2
    )


def test_supervised_loss_of_unlabeled_row_is_zero():
    assert supervised_loss([0.3, 0.7], [U, U]) == 0.0


def test_supervised_loss_is_clamped():
    assert math.isfinite(supervised_loss([0.0, 1.0], [1, 0]))


def test_supervised_loss_shape_check():
    with pytest.raises(DimensionMismatch):
        supervised_loss([0.5, 0.5], [1, 0, 1])


def test_zero_lambda_is_pure_supervised(small_model, tiny_dataset, toy_compiled):
    config = TrainConfig(**{"lambda": 0.0})
    total, _ = total_batch_loss(small_model, tiny_dataset, toy_compiled, config)
    outputs = predict_outputs(small_model, tiny_dataset.samples)
    expected = np.mean([supervised_loss(f, y) for f, y in zip(outputs, tiny_dataset.labels)])
    assert total == pytest.approx(expected)


@pytest.mark.parametrize("lam", [0.5, 3.0, 100.0])
def test_objective_splits_into_supervised_and_constraint_parts(
    small_model, tiny_dataset, toy_compiled, lam
):
    """total(lambda) - total(0) is lambda times the batch constraint loss."""
    with_constraint, _ = total_batch_loss(
        small_model, tiny_dataset, toy_compiled, TrainConfig(**{"lambda": lam})
    )
    without, _ = total_batch_loss(
        small_model, tiny_dataset, toy_compiled, TrainConfig(**{"lambda": 0.0})
    )
    outputs = predict_outputs(small_model, tiny_dataset.samples)
    closs = toy_compiled.sample_losses("train", outputs).mean()
    assert abs((with_constraint - without) - lam * closs) <= 1e-9


@pytest.mark.parametrize("constraint_on", ["all", "incomplete"])
def test_batch_gradient_matches_finite_differences(small_model, toy_compiled, constraint_on):
    """The analytic gradient of suploss + lambda * closs agrees with central differences."""
    rng = np.random.default_rng(3)
    labels = np.array([[1, U, 0, U], [U, U, U, U], [0, 0, 1, 1], [U, 1, U, 0]], dtype=np.int8)
    batch = Dataset(rng.normal(size=(4, 2)), labels, Split.TRAIN)
    config = TrainConfig(**{"lambda": 3.0}, constraint_on=constraint_on)
    _, grads = total_batch_loss(small_model, batch, toy_compiled, config)
    h = 1e-6
    for k in range(len(small_model.weights)):
        for idx in [(0, 0), (1, 1)]:
            original = small_model.weights[k][idx]
            small_model.weights[k][idx] = original + h
            plus = _objective(small_model, batch, toy_compiled, config)
            small_model.weights[k][idx] = original - h
            minus = _objective(small_model, batch, toy_compiled, config)
            small_model.weights[k][idx] = original
            numeric = (plus - minus) / (2 * h)
            assert grads[k].weight[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7)
        original = small_model.biases[k][0]
        small_model.biases[k][0] = original + h
        plus = _objective(small_model, batch, toy_compiled, config)
        small_model.biases[k][0] = original - h
        minus = _objective(small_model, batch, toy_compiled, config)
        small_model.biases[k][0] = original
        assert grads[k].bias[0] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-7)


def test_incomplete_mode_ignores_fully_labeled_batch(small_model, tiny_dataset, toy_compiled):
    everywhere = TrainConfig(**{"lambda": 5.0})
    incomplete = TrainConfig(**{"lambda": 5.0}, constraint_on="incomplete")
    total_all, _ = total_batch_loss(small_model, tiny_dataset, toy_compiled, everywhere)
    total_inc, _ = total_batch_loss(small_model, tiny_dataset, toy_compiled, incomplete)
    supervised_only, _ = total_batch_loss(
        small_model, tiny_dataset, toy_compiled, TrainConfig(**{"lambda": 0.0})
    )
    assert total_inc == pytest.approx(supervised_only)
    assert total_all > total_inc


def test_empty_batch(small_model, toy_compiled):
    empty = Dataset(np.zeros((0, 2)), np.zeros((0, 4)), Split.TRAIN)
    with pytest.raises(EmptyBatch):
        total_batch_loss(small_model, empty, toy_compiled, TrainConfig())


def test_adam_first_step_moves_by_learning_rate():
    config = TrainConfig(learning_rate=0.01)
    params = [np.array([1.0, -1.0, 0.0])]
    Adam(params, config).step([np.array([2.0, -0.5, 0.0])])
    np.testing.assert_allclose(params[0], [0.99, -0.99, 0.0], atol=1e-6)


def test_train_config_accepts_lambda_key():
    assert TrainConfig.model_validate({"lambda": 8}).lambda_ == 8.0
    with pytest.raises(ValueError):
        TrainConfig.model_validate({"lambda": -1})
    with pytest.raises(ValueError, match="betas"):
        TrainConfig(betas=(0.9, 1.0))
    with pytest.raises(ValueError):
        TrainConfig.model_validate({"epoch": 3})


def test_lambda_grid():
    assert LAMBDA_GRID == (0.01, 0.1, 1.0, 3.0, 5.0, 8.0, 10.0, 100.0)


def test_train_zero_epochs_returns_copy(small_model, tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    trained, history = train(small_model, tiny_dataset, val, toy_compiled, TrainConfig(epochs=0))
    assert trained is not small_model
    assert np.array_equal(trained.weights[0], small_model.weights[0])
    assert history.records == [] and history.best_epoch is None


def test_train_records_every_epoch(small_model, tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    config = TrainConfig(epochs=4, batch_size=5, learning_rate=0.05)
    trained, history = train(small_model, tiny_dataset, val, toy_compiled, config)
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    best = history.best_record
    assert best is not None
    assert best.val_f1 == max(r.val_f1 for r in history.records)
    assert all(r.val_f1 < best.val_f1 for r in history.records[: history.best_epoch - 1])
    assert not np.array_equal(trained.weights[0], small_model.weights[0])


def test_train_is_deterministic(small_model, tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    config = TrainConfig(epochs=3, batch_size=4, learning_rate=0.02, seed=9)
    first, _ = train(small_model, tiny_dataset, val, toy_compiled, config)
    second, _ = train(small_model, tiny_dataset, val, toy_compiled, config)
    for a, b in zip(first.weights, second.weights):
        assert np.array_equal(a, b)


def test_training_lowers_supervised_loss(tiny_dataset, toy_compiled):
    model = init_model([2, 16, 4], "tanh", seed=0)
    val = tiny_dataset.with_split(Split.VALIDATION)
    config = TrainConfig(epochs=60, batch_size=12, learning_rate=0.05)
    _, history = train(model, tiny_dataset, val, toy_compiled, config)
    assert history.records[-1].suploss < history.records[0].suploss


def test_train_checks_split_tags(small_model, tiny_dataset, toy_compiled):
    with pytest.raises(BadConfig, match="expected validation"):
        train(small_model, tiny_dataset, tiny_dataset, toy_compiled, TrainConfig(epochs=1))
    test_tagged = tiny_dataset.with_split(Split.TEST)
    with pytest.raises(BadConfig, match="expected train"):
        train(small_model, test_tagged, test_tagged, toy_compiled, TrainConfig(epochs=1))


def test_select_lambda_scores_each_value(tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    config = TrainConfig(epochs=2, batch_size=6, learning_rate=0.01)
    selection = select_lambda(
        lambda: init_model([2, 8, 4], "tanh", seed=1),
        tiny_dataset,
        val,
        toy_compiled,
        config,
        grid=(0.1, 1.0, 10.0),
    )
    assert [lam for lam, _ in selection.scores] == [0.1, 1.0, 10.0]
    assert [lam for lam, _ in selection.constraint_losses] == [0.1, 1.0, 10.0]
    best_score = max(score for _, score in selection.scores)
    tied = [lam for lam, score in selection.scores if score >= best_score - LAMBDA_F1_TOLERANCE]
    closs = dict(selection.constraint_losses)
    assert selection.best_lambda in tied
    assert closs[selection.best_lambda] == min(closs[lam] for lam in tied)


def test_select_lambda_prefers_lower_constraint_loss_on_f1_ties(tiny_dataset, toy_compiled):
    """With a tolerance of 1 every lambda ties, so the most consistent model is kept."""
    val = tiny_dataset.with_split(Split.VALIDATION)
    config = TrainConfig(epochs=3, batch_size=6, learning_rate=0.05)
    selection = select_lambda(
        lambda: init_model([2, 8, 4], "tanh", seed=1),
        tiny_dataset,
        val,
        toy_compiled,
        config,
        grid=(0.01, 100.0),
        tolerance=1.0,
    )
    closs = dict(selection.constraint_losses)
    assert selection.best_lambda == min(closs, key=closs.get)
    outputs = predict_outputs(selection.model, val.samples)
    assert toy_compiled.sample_losses("train", outputs).mean() == pytest.approx(
        closs[selection.best_lambda]
    )


def test_select_lambda_identical_runs_tie(tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    selection = select_lambda(
        lambda: init_model([2, 8, 4], "tanh", seed=1),
        tiny_dataset,
        val,
        toy_compiled,
        TrainConfig(epochs=2, batch_size=6, learning_rate=0.01),
        grid=(1.0, 1.0),
        tolerance=0.0,
    )
    assert selection.best_lambda == 1.0
    assert selection.scores[0] == selection.scores[1]


def test_select_lambda_empty_grid(tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    with pytest.raises(BadConfig, match="empty"):
        select_lambda(
            lambda: init_model([2, 4], seed=0), tiny_dataset, val, toy_compiled, TrainConfig(), ()
        )


def _full_dataset(n: int) -> Dataset:
    labels = np.tile(np.array([[1, 1, 0, 0]], dtype=np.int8), (n, 1))
    return Dataset(np.arange(2 * n, dtype=float).reshape(n, 2), labels, Split.TRAIN)


def test_semisupervised_keeps_thirty_percent():
    """100 samples at 30% labeled leaves exactly 30 rows with labels."""
    hidden = make_semisupervised(_full_dataset(100), 30, 0, seed=4)
    labeled_rows = np.any(hidden.labels != U, axis=1)
    assert labeled_rows.sum() == 30
    assert np.all(hidden.labels[labeled_rows] != U)
    assert np.all(hidden.labels[~labeled_rows] == U)


def test_semisupervised_partial_per_polarity():
    hidden = make_semisupervised(_full_dataset(10), 100, 50, seed=0)
    for row in hidden.labels:
        assert list(row).count(U) == 2
        assert list(row).count(1) == 1
        assert list(row).count(0) == 1


def test_semisupervised_rounds_down():
    hidden = make_semisupervised(_full_dataset(7), 50, 0, seed=0)
    assert np.any(hidden.labels != U, axis=1).sum() == 3


def test_semisupervised_is_seeded():
    a = make_semisupervised(_full_dataset(20), 40, 50, seed=2)
    b = make_semisupervised(_full_dataset(20), 40, 50, seed=2)
    assert np.array_equal(a.labels, b.labels)


def test_semisupervised_rejects_bad_percent():
    with pytest.raises(BadPercent, match="percent_labeled"):
        make_semisupervised(_full_dataset(5), 101, 0)
    with pytest.raises(BadPercent, match="percent_partial"):
        make_semisupervised(_full_dataset(5), 50, -1)


def test_dataset_validation():
    with pytest.raises(BadConfig, match="only allowed in the train split"):
        Dataset(np.zeros((1, 2)), [[U, U]], Split.VALIDATION)
    with pytest.raises(BadConfig, match="0, 1 or unknown"):
        Dataset(np.zeros((1, 2)), [[2, 0]], Split.TRAIN)
    with pytest.raises(DimensionMismatch):
        Dataset(np.zeros((2, 2)), [[1, 0]], Split.TRAIN)
    with pytest.raises(BadConfig, match="finite"):
        Dataset(np.array([[np.inf, 0.0]]), [[1, 0]], Split.TRAIN)


def test_dataset_arrays_are_read_only(tiny_dataset):
    with pytest.raises(ValueError):
        tiny_dataset.samples[0, 0] = 1.0


def test_dataset_csv(tiny_dataset):
    hidden = make_semisupervised(tiny_dataset, 50, 50, seed=1)
    text = write_dataset_csv(hidden)
    assert text.splitlines()[0] == "x0,x1,CAT,ANIMAL,MOTORBIKE,VEHICLE"
    assert "?" in text
    back = read_dataset_csv(text, "train")
    assert np.array_equal(back.samples, hidden.samples)
    assert np.array_equal(back.labels, hidden.labels)
    assert back.class_names == hidden.class_names


def test_dataset_csv_bad_cell():
    with pytest.raises(BadConfig, match="Line 2"):
        read_dataset_csv("x0,A\n0.5,maybe\n", Split.TEST)
    with pytest.raises(BadConfig, match="expected 2 cells"):
        read_dataset_csv("x0,A\n0.5\n", Split.TEST)


def test_history_csv(small_model, tiny_dataset, toy_compiled):
    val = tiny_dataset.with_split(Split.VALIDATION)
    _, history = train(small_model, tiny_dataset, val, toy_compiled, TrainConfig(epochs=2))
    lines = write_history_csv(history).splitlines()
    assert lines[0] == "epoch,suploss,closs,val_f1"
    assert len(lines) == 3
