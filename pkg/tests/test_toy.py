"""Tests for the toy world generator."""

from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from harness.toy import TOY_CLASSES, GaussianComponent, ToyConfig, gen_toy
from shield.errors import BadConfig
from shield.knowledge import boolean_eval
from shield.metrics import UNKNOWN
from shield.training import Split


def _small_config(**overrides) -> ToyConfig:
    components = [
        GaussianComponent(label=name, mean=(float(i), 0.0), cov=((0.1, 0.0), (0.0, 0.1)), count=10)
        for i, name in enumerate(TOY_CLASSES)
    ]
    return ToyConfig(components=components, **overrides)


def test_default_split_sizes():
    train, val, test = gen_toy(ToyConfig())
    assert (train.n, val.n, test.n) == (600, 200, 200)
    assert (train.split, val.split, test.split) == (Split.TRAIN, Split.VALIDATION, Split.TEST)
    assert train.class_names == TOY_CLASSES


def test_only_train_labels_are_hidden():
    """70% of the training rows lose their labels; evaluation splits stay complete."""
    train, val, test = gen_toy(ToyConfig())
    labeled = np.any(train.labels != UNKNOWN, axis=1)
    assert labeled.sum() == 180
    assert val.fully_labeled and test.fully_labeled


def test_ground_truth_satisfies_knowledge(toy_base):
    _, val, test = gen_toy(ToyConfig(seed=3))
    for data in (val, test):
        for row in data.labels:
            assignment = dict(zip(TOY_CLASSES, (bool(v) for v in row)))
            assert all(boolean_eval(wf.formula, assignment) for wf in toy_base.formulas)


def test_cat_component_labels():
    config = ToyConfig(
        components=[
            GaussianComponent(
                label="CAT", mean=(-2.0, 0.75), cov=((0.2, 0.0), (0.0, 0.2)), count=20
            )
        ],
        unlabeled_fraction=0.0,
    )
    train, _, _ = gen_toy(config)
    assert np.all(train.labels == np.array([1, 1, 0, 0]))


def test_same_seed_same_data():
    first = gen_toy(_small_config(seed=5))
    second = gen_toy(_small_config(seed=5))
    other = gen_toy(_small_config(seed=6))
    for a, b in zip(first, second):
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(first[0].samples, other[0].samples)


def test_partial_fraction_hides_entries():
    train, _, _ = gen_toy(_small_config(unlabeled_fraction=0.0, partial_fraction=0.5))
    for row in train.labels:
        assert list(row).count(UNKNOWN) in (1, 2)


def test_component_validation():
    with pytest.raises(ValidationError, match="positive-definite"):
        GaussianComponent(label="CAT", mean=(0.0, 0.0), cov=((1.0, 2.0), (2.0, 1.0)), count=5)
    with pytest.raises(ValidationError, match="symmetric"):
        GaussianComponent(label="CAT", mean=(0.0, 0.0), cov=((1.0, 0.5), (0.0, 1.0)), count=5)
    with pytest.raises(ValidationError):
        GaussianComponent(label="CAT", mean=(0.0, 0.0), cov=((1.0, 0.0), (0.0, 1.0)), count=0)
    with pytest.raises(ValidationError, match="sum to 1"):
        ToyConfig(split_fractions=(0.5, 0.5, 0.5))


def test_missing_assignment():
    config = _small_config(assignment={"CAT": ["CAT", "ANIMAL"]})
    with pytest.raises(BadConfig, match="no label assignment"):
        gen_toy(config)


def test_assignment_to_unknown_class():
    config = _small_config(
        assignment={name: [name, "ROBOT"] for name in TOY_CLASSES},
    )
    with pytest.raises(BadConfig, match="unknown class ROBOT"):
        gen_toy(config)


def test_too_few_samples():
    identity = ((1.0, 0.0), (0.0, 1.0))
    component = GaussianComponent(label="CAT", mean=(0.0, 0.0), cov=identity, count=2)
    with pytest.raises(BadConfig, match="too few"):
        gen_toy(ToyConfig(components=[component]))
