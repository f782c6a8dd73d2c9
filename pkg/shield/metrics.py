"""
Evaluation metrics: macro F1 over all classes and main-class accuracy.

Label matrices use 1 / 0 for known labels and UNKNOWN (-1) for discarded ones.
Unknown entries are skipped when counting.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySet, NoMainClasses, NotSingleLabel
from .net import Model, predict_outputs

if TYPE_CHECKING:
    from .training import Dataset

UNKNOWN = -1
THRESHOLD = 0.5


def _check_pair(predictions: np.ndarray, labels: np.ndarray) -> None:
    if predictions.shape != labels.shape or predictions.ndim != 2:
        raise DimensionMismatch(
            f"Predictions {predictions.shape} and labels {labels.shape} do not line up"
        )
    if predictions.shape[0] == 0:
        raise EmptySet("Cannot score an empty set")


def per_class_f1(predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    pred = np.asarray(predictions, dtype=bool)
    lab = np.asarray(labels)
    _check_pair(pred, lab)
    known = lab != UNKNOWN
    truth = lab == 1
    tp = np.sum(pred & truth & known, axis=0)
    fp = np.sum(pred & ~truth & known, axis=0)
    fn = np.sum(~pred & truth & known, axis=0)
    denom = 2 * tp + fp + fn
    # 0/0 counts as 0
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_f1_from_predictions(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(per_class_f1(predictions, labels).mean())


def macro_f1(model: Model, dataset: "Dataset", threshold: float = THRESHOLD) -> float:
    if dataset.n == 0:
        raise EmptySet("Cannot score an empty dataset")
    outputs = predict_outputs(model, dataset.samples)
    return macro_f1_from_predictions(outputs > threshold, dataset.labels)


def main_predictions(outputs: np.ndarray, main_classes: Sequence[int]) -> np.ndarray:
    """Class index of the winning main class per row; ties go to the lowest index."""
    if len(main_classes) == 0:
        raise NoMainClasses("No main classes to predict from")
    main = np.asarray(main_classes, dtype=int)
    out = np.atleast_2d(np.asarray(outputs, dtype=float))
    return main[np.argmax(out[:, main], axis=1)]


def main_targets(labels: np.ndarray, main_classes: Sequence[int]) -> np.ndarray:
    """The single positive main class of each row; NotSingleLabel otherwise."""
    if len(main_classes) == 0:
        raise NoMainClasses("No main classes to score against")
    main = np.asarray(main_classes, dtype=int)
    lab = np.atleast_2d(np.asarray(labels))
    positives = lab[:, main] == 1
    counts = positives.sum(axis=1)
    bad = np.flatnonzero(counts != 1)
    if bad.size:
        raise NotSingleLabel(
            f"Row {int(bad[0])} has {int(counts[bad[0]])} positive main classes, expected 1"
        )
    return main[np.argmax(positives, axis=1)]


def is_single_label(labels: np.ndarray, main_classes: Sequence[int]) -> bool:
    if len(main_classes) == 0:
        return False
    lab = np.atleast_2d(np.asarray(labels))
    return bool(np.all((lab[:, list(main_classes)] == 1).sum(axis=1) == 1))


def acc_main_from_outputs(
    outputs: np.ndarray, labels: np.ndarray, main_classes: Sequence[int]
) -> float:
    out = np.asarray(outputs, dtype=float)
    lab = np.asarray(labels)
    _check_pair(out, lab)
    return float(np.mean(main_predictions(out, main_classes) == main_targets(lab, main_classes)))


def acc_main(model: Model, dataset: "Dataset", main_classes: Sequence[int]) -> float:
    if dataset.n == 0:
        raise EmptySet("Cannot score an empty dataset")
    outputs = predict_outputs(model, dataset.samples)
    return acc_main_from_outputs(outputs, dataset.labels, main_classes)
