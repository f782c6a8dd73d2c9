"""
Constrained semi-supervised training.

The objective on a minibatch B is

    mean_j suploss(f(x_j), y_j)  +  lambda * phi(f, B)

where suploss is binary cross-entropy over the known label entries only and
phi is the weighted constraint loss averaged over the batch. Parameters are
updated with Adam; the returned model is the snapshot of the epoch with the
best validation macro F1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .compiler import KnowledgeLike, WeightSet, as_compiled
from .errors import BadConfig, BadPercent, DimensionMismatch, EmptyBatch, EmptySet
from .logs import log_event
from .metrics import UNKNOWN, macro_f1
from .net import LayerGradient, Model, forward, grad_weights, predict_outputs

BCE_CLAMP = 1e-7
LAMBDA_GRID: Tuple[float, ...] = (1e-2, 1e-1, 1.0, 3.0, 5.0, 8.0, 10.0, 1e2)
LAMBDA_F1_TOLERANCE = 0.01


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples (n, d) with label matrix (n, c) over {0, 1, UNKNOWN}."""

    samples: np.ndarray
    labels: np.ndarray
    split: Split
    class_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=float)
        labels = np.array(self.labels, dtype=np.int8)
        if samples.ndim == 1 and samples.size == 0:
            samples = samples.reshape(0, 0)
        if labels.ndim == 1 and labels.size == 0:
            labels = labels.reshape(0, len(self.class_names))
        if samples.ndim != 2 or labels.ndim != 2:
            raise DimensionMismatch("Samples and labels must both be 2-D")
        if samples.shape[0] != labels.shape[0]:
            raise DimensionMismatch(
                f"{samples.shape[0]} samples but {labels.shape[0]} label rows"
            )
        if self.class_names and labels.shape[1] != len(self.class_names):
            raise DimensionMismatch(
                f"{labels.shape[1]} label columns for {len(self.class_names)} class names"
            )
        if not np.all(np.isfinite(samples)):
            raise BadConfig("Feature values must be finite")
        if not np.all(np.isin(labels, (0, 1, UNKNOWN))):
            raise BadConfig("Labels must be 0, 1 or unknown")
        split = Split(self.split)
        unlabeled = labels.shape[1] > 0 and np.any(np.all(labels == UNKNOWN, axis=1))
        if split is not Split.TRAIN and unlabeled:
            raise BadConfig(
                f"Fully unlabeled samples are only allowed in the train split, not {split.value}"
            )
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n(self) -> int:
        return int(self.samples.shape[0])

    @property
    def d(self) -> int:
        return int(self.samples.shape[1])

    @property
    def c(self) -> int:
        return int(self.labels.shape[1])

    @property
    def known_mask(self) -> np.ndarray:
        return self.labels != UNKNOWN

    @property
    def fully_labeled(self) -> bool:
        return bool(np.all(self.known_mask))

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.samples[idx], self.labels[idx], self.split, self.class_names)

    def with_split(self, split: Split | str) -> "Dataset":
        return Dataset(self.samples, self.labels, Split(split), self.class_names)

    def with_samples(self, samples: np.ndarray) -> "Dataset":
        return Dataset(samples, self.labels, self.split, self.class_names)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda")
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-5, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    seed: int = 0
    weight_set: WeightSet = WeightSet.TRAIN
    constraint_on: Literal["all", "incomplete"] = "all"

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in value):
            raise ValueError(f"Adam betas must lie in [0, 1), got {value}")
        return value


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    suploss: float
    closs: float
    val_f1: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def best_record(self) -> Optional[EpochRecord]:
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch - 1]


@dataclass(frozen=True)
class BatchLoss:
    total: float
    suploss: float
    closs: float
    gradients: List[LayerGradient]


def _masked_bce(outputs: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample masked BCE (n,) and its gradient w.r.t. the logits (n, c)."""
    known = labels != UNKNOWN
    target = (labels == 1).astype(float)
    clamped = np.clip(outputs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(target * np.log(clamped) + (1.0 - target) * np.log(1.0 - clamped))
    counts = known.sum(axis=1)
    safe = np.maximum(counts, 1)
    losses = np.where(counts > 0, (terms * known).sum(axis=1) / safe, 0.0)
    # d/dlogit of BCE(sigmoid(l)) is f - y; zero where the clamp is active
    active = known & (outputs == clamped)
    grad = np.where(active, (outputs - target) / safe[:, None], 0.0)
    return losses, grad


def supervised_loss(
    outputs: np.ndarray | Sequence[float], label_row: np.ndarray | Sequence[int]
) -> float:
    """Mean binary cross-entropy over the known entries of one label row."""
    out = np.asarray(outputs, dtype=float)
    lab = np.asarray(label_row)
    if out.ndim != 1 or out.shape != lab.shape:
        raise DimensionMismatch(f"Outputs {out.shape} and labels {lab.shape} do not line up")
    losses, _ = _masked_bce(out[None, :], lab[None, :])
    return float(losses[0])


def _batch_loss(
    model: Model,
    samples: np.ndarray,
    labels: np.ndarray,
    knowledge: KnowledgeLike,
    config: TrainConfig,
) -> BatchLoss:
    n = samples.shape[0]
    if n == 0:
        raise EmptyBatch("Training batch is empty")
    compiled = as_compiled(knowledge)
    trace = forward(model, samples)
    f = trace.outputs

    sup, sup_grad = _masked_bce(f, labels)
    upstream = sup_grad / n

    if config.constraint_on == "incomplete":
        rows = np.flatnonzero(np.any(labels == UNKNOWN, axis=1))
    else:
        rows = np.arange(n)
    closs = 0.0
    if rows.size:
        sub = f[rows]
        closs = float(compiled.sample_losses(config.weight_set, sub).mean())
        if config.lambda_ > 0.0:
            dphi = compiled.grad(config.weight_set, sub) * sub * (1.0 - sub)
            upstream[rows] += config.lambda_ * dphi / rows.size

    suploss = float(sup.mean())
    return BatchLoss(
        total=suploss + config.lambda_ * closs,
        suploss=suploss,
        closs=closs,
        gradients=grad_weights(model, trace, upstream),
    )


def total_batch_loss(
    model: Model,
    batch: Dataset,
    bound: KnowledgeLike,
    config: TrainConfig,
) -> Tuple[float, List[LayerGradient]]:
    """Objective value on one batch and its gradient w.r.t. every layer."""
    result = _batch_loss(model, batch.samples, batch.labels, bound, config)
    return result.total, result.gradients


class Adam:
    """Adam over a flat list of parameter arrays, updated in place."""

    def __init__(self, params: List[np.ndarray], config: TrainConfig):
        self.params = params
        self.lr = config.learning_rate
        self.beta1, self.beta2 = config.betas
        self.eps = config.eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _flat_params(model: Model) -> List[np.ndarray]:
    params: List[np.ndarray] = []
    for w, b in zip(model.weights, model.biases):
        params.extend((w, b))
    return params


def _flat_grads(grads: List[LayerGradient]) -> List[np.ndarray]:
    flat: List[np.ndarray] = []
    for g in grads:
        flat.extend((g.weight, g.bias))
    return flat


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset,
    bound: KnowledgeLike,
    config: TrainConfig,
) -> Tuple[Model, TrainHistory]:
    """
    Minibatch Adam on a copy of ``model``.

    Shuffling is seeded from ``config.seed``. The snapshot kept is the epoch
    with the highest validation macro F1; the earliest epoch wins ties.
    """
    history = TrainHistory()
    work = model.copy()
    if config.epochs == 0:
        return work, history
    if train_set.n == 0:
        raise EmptySet("Training set is empty")
    if train_set.split is not Split.TRAIN:
        raise BadConfig(f"Training data is tagged {train_set.split.value}, expected train")
    if val_set.split is not Split.VALIDATION:
        raise BadConfig(f"Validation data is tagged {val_set.split.value}, expected validation")

    compiled = as_compiled(bound)
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(_flat_params(work), config)
    best_model = work.copy()
    best_f1 = -math.inf

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_set.n)
        sup_sum = closs_sum = 0.0
        for start in range(0, train_set.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            result = _batch_loss(
                work, train_set.samples[idx], train_set.labels[idx], compiled, config
            )
            optimizer.step(_flat_grads(result.gradients))
            sup_sum += result.suploss * idx.size
            closs_sum += result.closs * idx.size

        val_f1 = macro_f1(work, val_set)
        history.records.append(
            EpochRecord(epoch, sup_sum / train_set.n, closs_sum / train_set.n, val_f1)
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_model = work.copy()
            history.best_epoch = epoch
        log_event(
            "epoch_finished",
            epoch=epoch,
            suploss=history.records[-1].suploss,
            closs=history.records[-1].closs,
            val_f1=val_f1,
            lam=config.lambda_,
        )

    return best_model, history


@dataclass(frozen=True)
class LambdaSelection:
    best_lambda: float
    model: Model
    history: TrainHistory
    scores: Tuple[Tuple[float, float], ...]
    constraint_losses: Tuple[Tuple[float, float], ...] = ()


def select_lambda(
    model_factory: Callable[[], Model],
    train_set: Dataset,
    val_set: Dataset,
    bound: KnowledgeLike,
    config: TrainConfig,
    grid: Iterable[float] = LAMBDA_GRID,
    tolerance: float = LAMBDA_F1_TOLERANCE,
) -> LambdaSelection:
    """
    Train one model per lambda and keep one of them.

    Every lambda whose validation F1 is within ``tolerance`` of the best
    counts as tied; among those the model with the lowest mean validation
    constraint loss wins, and the earliest lambda breaks what remains.
    """
    compiled = as_compiled(bound)
    candidates: List[Tuple[float, Model, TrainHistory, float, float]] = []
    for lam in grid:
        cfg = config.model_copy(update={"lambda_": float(lam)})
        trained, history = train(model_factory(), train_set, val_set, compiled, cfg)
        best = history.best_record
        score = best.val_f1 if best is not None else macro_f1(trained, val_set)
        outputs = predict_outputs(trained, val_set.samples)
        closs = float(compiled.sample_losses(config.weight_set, outputs).mean())
        candidates.append((float(lam), trained, history, score, closs))
        log_event("lambda_scored", lam=float(lam), val_f1=score, val_closs=closs)
    if not candidates:
        raise BadConfig("Lambda grid is empty")
    best_score = max(c[3] for c in candidates)
    tied = [c for c in candidates if c[3] >= best_score - tolerance]
    lam, model, history, _, _ = min(tied, key=lambda c: c[4])
    return LambdaSelection(
        lam,
        model,
        history,
        tuple((c[0], c[3]) for c in candidates),
        tuple((c[0], c[4]) for c in candidates),
    )


def make_semisupervised(
    dataset: Dataset,
    percent_labeled: float,
    percent_partial: float,
    seed: int = 0,
) -> Dataset:
    """
    Hide labels the way the partial-labeling protocol does.

    (100 - %L)% of the samples lose every label. In each remaining sample, %P
    of the positive entries and %P of the negative entries become unknown,
    rounded down per polarity.
    """
    for name, pct in (("percent_labeled", percent_labeled), ("percent_partial", percent_partial)):
        if not 0.0 <= pct <= 100.0:
            raise BadPercent(f"{name} must lie in [0, 100], got {pct}")

    rng = np.random.default_rng(seed)
    labels = np.array(dataset.labels, dtype=np.int8)
    n = dataset.n
    n_labeled = math.floor(n * percent_labeled / 100.0 + 1e-9)
    order = rng.permutation(n)
    labels[order[n_labeled:]] = UNKNOWN

    for row in np.sort(order[:n_labeled]):
        for polarity in (1, 0):
            idx = np.flatnonzero(labels[row] == polarity)
            k = math.floor(idx.size * percent_partial / 100.0 + 1e-9)
            if k:
                labels[row, rng.choice(idx, size=k, replace=False)] = UNKNOWN

    return Dataset(dataset.samples, labels, dataset.split, dataset.class_names)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

_CELL = {0: "0", 1: "1", UNKNOWN: "?"}
_PARSE_CELL = {"0": 0, "1": 1, "?": UNKNOWN}


def write_dataset_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(dataset.d)] + list(dataset.class_names))
    for x, y in zip(dataset.samples, dataset.labels):
        writer.writerow([repr(float(v)) for v in x] + [_CELL[int(v)] for v in y])
    return buf.getvalue()


def read_dataset_csv(text: str, split: Split | str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise BadConfig("Dataset file is empty")
    header = [h.strip() for h in rows[0]]
    d = 0
    while d < len(header) and header[d] == f"x{d}":
        d += 1
    class_names = tuple(header[d:])
    samples: List[List[float]] = []
    labels: List[List[int]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise BadConfig(f"Line {lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            samples.append([float(v) for v in row[:d]])
            labels.append([_PARSE_CELL[v.strip()] for v in row[d:]])
        except (KeyError, ValueError) as exc:
            raise BadConfig(f"Line {lineno}: bad cell {exc}") from None
    return Dataset(
        np.array(samples, dtype=float).reshape(len(samples), d),
        np.array(labels, dtype=np.int8).reshape(len(labels), len(class_names)),
        Split(split),
        class_names,
    )


def write_history_csv(history: TrainHistory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "suploss", "closs", "val_f1"])
    for r in history.records:
        writer.writerow([r.epoch, repr(r.suploss), repr(r.closs), repr(r.val_f1)])
    return buf.getvalue()
