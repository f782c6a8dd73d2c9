"""Shared fixtures: shipped knowledge, bound toy/animal knowledge and a small model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from shield.compiler import CompiledKnowledge, compile_knowledge
from shield.knowledge import (
    BoundKnowledge,
    KnowledgeBase,
    bind_predicates,
    parse_knowledge_file,
    read_class_names,
)
from shield.net import Model, init_model
from shield.training import Dataset, Split

ROOT = Path(__file__).resolve().parent.parent
KB_DIR = ROOT / "kb"
TOY_CLASSES = ["CAT", "ANIMAL", "MOTORBIKE", "VEHICLE"]


@pytest.fixture(scope="session")
def toy_text() -> str:
    return (KB_DIR / "toy.kb").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def toy_base(toy_text: str) -> KnowledgeBase:
    return parse_knowledge_file(toy_text)


@pytest.fixture(scope="session")
def toy_bound(toy_base: KnowledgeBase) -> BoundKnowledge:
    return bind_predicates(toy_base, TOY_CLASSES)


@pytest.fixture(scope="session")
def toy_compiled(toy_bound: BoundKnowledge) -> CompiledKnowledge:
    return compile_knowledge(toy_bound)


@pytest.fixture(scope="session")
def animal_classes() -> list:
    return read_class_names((KB_DIR / "animals.classes").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def animals_bound(animal_classes: list) -> BoundKnowledge:
    base = parse_knowledge_file((KB_DIR / "animals.kb").read_text(encoding="utf-8"))
    return bind_predicates(base, animal_classes, 7)


@pytest.fixture
def small_model() -> Model:
    return init_model([2, 8, 4], "tanh", seed=3)


@pytest.fixture
def tiny_dataset() -> Dataset:
    rng = np.random.default_rng(11)
    samples = rng.normal(size=(12, 2))
    labels = np.array(
        [[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1], [0, 0, 0, 1]] * 3, dtype=np.int8
    )
    return Dataset(samples, labels, Split.TRAIN, tuple(TOY_CLASSES))
