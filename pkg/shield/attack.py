"""
Multi-label knowledge-driven attack.

The attacker minimises

    max(l_p, -kappa) - min(l_n, kappa) + alpha * phi_test(f(x'))

over the L2 ball ||x' - x|| <= epsilon, where p is the weakest positive class
and n the strongest negative class of the current iterate. With alpha = 0 this
is the black-box multi-label margin attack; alpha > 0 adds the knowledge term
so the adversarial point also stays below the rejection threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import AbstractSet, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .compiler import CompiledKnowledge, KnowledgeLike, WeightSet, as_compiled
from .defense import RejectionRule, should_reject
from .errors import BadConfig, DimensionMismatch, InvalidPartition
from .logs import log_event
from .metrics import UNKNOWN, main_predictions
from .net import ForwardTrace, Model, forward, grad_input
from .training import Dataset

ALPHA_GRID: Tuple[float, ...] = (0.1, 1.0, 10.0, 100.0, 1000.0)


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(gt=0.0)
    kappa: float = Field(default=math.inf, ge=0.0)
    alpha: float = Field(default=0.0, ge=0.0)
    iterations: int = Field(default=50, ge=1)
    step_size: Optional[float] = Field(default=None, gt=0.0)
    box: Optional[Tuple[float, float]] = None
    restrict_to: Optional[Tuple[int, ...]] = None
    single_label_mode: bool = False
    random_start: bool = False
    seed: int = 0

    @field_validator("box")
    @classmethod
    def _box_ordered(cls, value: Optional[Tuple[float, float]]) -> Optional[Tuple[float, float]]:
        if value is not None and not value[0] < value[1]:
            raise ValueError(f"Box lower bound must be below the upper bound, got {value}")
        return value

    @model_validator(mode="after")
    def _restrict_nonempty(self) -> "AttackConfig":
        if self.restrict_to is not None and not self.restrict_to:
            raise ValueError("restrict_to must name at least one class")
        return self

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.iterations


@dataclass(frozen=True)
class ClassPartition:
    positives: Tuple[int, ...]
    negatives: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positives", tuple(int(i) for i in self.positives))
        object.__setattr__(self, "negatives", tuple(int(i) for i in self.negatives))
        if not self.positives or not self.negatives:
            raise InvalidPartition("Both the positive and the negative class set must be non-empty")
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise InvalidPartition(f"Classes {sorted(overlap)} are both positive and negative")


def partition_from_labels(
    label_row: np.ndarray | Sequence[int], restrict_to: Optional[Sequence[int]] = None
) -> ClassPartition:
    row = np.asarray(label_row)
    classes = range(row.size) if restrict_to is None else restrict_to
    if any(row[i] == UNKNOWN for i in classes):
        raise InvalidPartition("Attack partitions need fully known labels")
    return ClassPartition(
        positives=tuple(i for i in classes if row[i] == 1),
        negatives=tuple(i for i in classes if row[i] == 0),
    )


def _check_partition(
    partition: ClassPartition, c: int, restrict_to: Optional[Sequence[int]]
) -> None:
    members = partition.positives + partition.negatives
    if any(not 0 <= i < c for i in members):
        raise InvalidPartition(f"Partition indices must lie in [0, {c})")
    if restrict_to is not None and not set(members) <= set(restrict_to):
        raise InvalidPartition("Partition reaches outside restrict_to")


def select_pn(
    logits: np.ndarray | Sequence[float],
    partition: ClassPartition,
    kappa: float,
    exhausted_p: AbstractSet[int] = frozenset(),
    exhausted_n: AbstractSet[int] = frozenset(),
) -> Tuple[Optional[int], Optional[int]]:
    """Weakest live positive and strongest live negative; ties go to the lowest index."""
    scores = np.asarray(logits, dtype=float)
    p_live = sorted(i for i in partition.positives if i not in exhausted_p)
    n_live = sorted(i for i in partition.negatives if i not in exhausted_n)
    p = min(p_live, key=lambda i: scores[i]) if p_live else None
    n = max(n_live, key=lambda i: (scores[i], -i)) if n_live else None
    return p, n


def attack_objective(
    logits: np.ndarray | Sequence[float],
    p: Optional[int],
    n: Optional[int],
    kappa: float,
    alpha: float,
    constraint_loss_value: float,
) -> float:
    scores = np.asarray(logits, dtype=float)
    bounded = math.isfinite(kappa)
    p_term = max(scores[p], -kappa) if p is not None else (-kappa if bounded else 0.0)
    n_term = min(scores[n], kappa) if n is not None else (kappa if bounded else 0.0)
    return float(p_term - n_term + alpha * constraint_loss_value)


def project_l2(
    origin: np.ndarray | Sequence[float],
    candidate: np.ndarray | Sequence[float],
    epsilon: float,
    box: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """Pull the candidate back into the epsilon ball around origin, then clip to the box."""
    x0 = np.asarray(origin, dtype=float)
    x1 = np.asarray(candidate, dtype=float)
    if x0.shape != x1.shape:
        raise DimensionMismatch(f"Origin {x0.shape} and candidate {x1.shape} differ in shape")
    delta = x1 - x0
    norm = float(np.linalg.norm(delta))
    if norm > epsilon:
        delta = delta * (epsilon / norm)
    projected = x0 + delta
    if box is not None:
        projected = np.clip(projected, box[0], box[1])
    return projected


@dataclass(frozen=True)
class ObjectiveEval:
    objective: float
    gradient: np.ndarray
    logits: np.ndarray
    outputs: np.ndarray
    constraint_loss: float


def _evaluate(
    model: Model,
    trace: ForwardTrace,
    p: Optional[int],
    n: Optional[int],
    config: AttackConfig,
    compiled: CompiledKnowledge,
) -> ObjectiveEval:
    logits, f = trace.logits, trace.outputs
    closs = float(compiled.sample_losses(WeightSet.TEST, f)[0])
    upstream = np.zeros_like(logits)
    # clamped terms contribute a zero subgradient
    if p is not None and logits[p] > -config.kappa:
        upstream[p] += 1.0
    if n is not None and logits[n] < config.kappa:
        upstream[n] -= 1.0
    if config.alpha > 0.0:
        upstream += config.alpha * compiled.grad(WeightSet.TEST, f)[0] * f * (1.0 - f)
    return ObjectiveEval(
        objective=attack_objective(logits, p, n, config.kappa, config.alpha, closs),
        gradient=grad_input(model, trace, upstream),
        logits=logits,
        outputs=f,
        constraint_loss=closs,
    )


def objective_gradient(
    model: Model,
    x: np.ndarray | Sequence[float],
    p: Optional[int],
    n: Optional[int],
    config: AttackConfig,
    knowledge: KnowledgeLike,
) -> ObjectiveEval:
    """Objective value and its exact gradient w.r.t. the input at x."""
    trace = forward(model, np.asarray(x, dtype=float).reshape(-1))
    return _evaluate(model, trace, p, n, config, as_compiled(knowledge))


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    objective: float
    best_objective: float
    constraint_loss: float
    p: Optional[int]
    n: Optional[int]
    l2_distance: float


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    x_orig: np.ndarray
    objective: float
    best_iteration: int
    trace: Tuple[TraceEntry, ...]
    l2_distance: float
    saturated: bool
    outputs: np.ndarray
    measure: float
    prediction_changed: bool
    misclassified: bool
    rejected: Optional[bool] = None

    @property
    def rejection_evaded(self) -> Optional[bool]:
        return None if self.rejected is None else not self.rejected

    @property
    def success(self) -> bool:
        return self.misclassified and self.rejected is not True


def _predicted_classes(
    outputs: np.ndarray, classes: Sequence[int], single_label: bool
) -> Tuple[int, ...]:
    if single_label:
        return (int(main_predictions(outputs, classes)[0]),)
    return tuple(i for i in classes if outputs[i] > 0.5)


def _score_outcome(
    model: Model,
    x_orig: np.ndarray,
    x_adv: np.ndarray,
    partition: ClassPartition,
    config: AttackConfig,
    compiled: CompiledKnowledge,
    rule: Optional[RejectionRule],
) -> dict:
    classes = config.restrict_to or tuple(range(compiled.c))
    clean = forward(model, x_orig).outputs
    adv = forward(model, x_adv).outputs
    before = _predicted_classes(clean, classes, config.single_label_mode)
    after = _predicted_classes(adv, classes, config.single_label_mode)
    if config.single_label_mode:
        misclassified = after[0] not in partition.positives
    else:
        misclassified = set(after) != set(partition.positives)
    return {
        "outputs": adv,
        "measure": float(compiled.sample_losses(WeightSet.TEST, adv)[0]),
        "prediction_changed": before != after,
        "misclassified": misclassified,
        "rejected": None if rule is None else should_reject(rule, model, x_adv).reject,
    }


def _random_start(
    x0: np.ndarray, config: AttackConfig, rng: np.random.Generator
) -> np.ndarray:
    direction = rng.normal(size=x0.shape)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return x0.copy()
    radius = config.epsilon * rng.uniform() ** (1.0 / x0.size)
    return project_l2(x0, x0 + radius * direction / norm, config.epsilon, config.box)


def mka(
    model: Model,
    x: np.ndarray | Sequence[float],
    partition: ClassPartition,
    bound: KnowledgeLike,
    config: AttackConfig,
    rule: Optional[RejectionRule] = None,
) -> AttackResult:
    """
    Projected normalised-gradient descent on the attack objective.

    Iteration 0 scores the starting point; each later iteration takes one step
    and projects back. Classes whose logit has crossed the kappa clamp are
    marked exhausted and the next weakest positive (strongest negative) takes
    over. Once both sets are exhausted the run is saturated: with alpha = 0
    the loop stops there, otherwise it keeps descending on the knowledge term
    while the clamped margins of the current weakest positive and strongest
    negative hold the flip in place. The iterate with the lowest objective is
    returned, the earliest on ties.
    """
    compiled = as_compiled(bound)
    x0 = np.asarray(x, dtype=float).reshape(-1)
    if x0.size != model.n_inputs:
        raise DimensionMismatch(f"Expected input of dimension {model.n_inputs}, got {x0.size}")
    _check_partition(partition, model.n_outputs, config.restrict_to)

    rng = np.random.default_rng(config.seed)
    current = _random_start(x0, config, rng) if config.random_start else x0.copy()
    exhausted_p: set[int] = set()
    exhausted_n: set[int] = set()
    fixed_p: Optional[int] = None
    best_x, best_obj, best_it = current, math.inf, 0
    entries: List[TraceEntry] = []
    saturated = False

    for it in range(config.iterations + 1):
        trace = forward(model, current)
        logits = trace.logits
        while True:
            p, n = select_pn(logits, partition, config.kappa, exhausted_p, exhausted_n)
            if fixed_p is not None:
                p = fixed_p
            elif p is not None and logits[p] < -config.kappa and not config.single_label_mode:
                exhausted_p.add(p)
                continue
            if n is not None and logits[n] > config.kappa:
                exhausted_n.add(n)
                continue
            break
        if config.single_label_mode and fixed_p is None:
            fixed_p = p
        if p is None and n is None:
            saturated = True
        if saturated and config.alpha > 0.0:
            p, n = select_pn(logits, partition, config.kappa)

        ev = _evaluate(model, trace, p, n, config, compiled)
        if ev.objective < best_obj:
            best_x, best_obj, best_it = current, ev.objective, it
        entries.append(
            TraceEntry(
                iteration=it,
                objective=ev.objective,
                best_objective=best_obj,
                constraint_loss=ev.constraint_loss,
                p=p,
                n=n,
                l2_distance=float(np.linalg.norm(current - x0)),
            )
        )
        if saturated and config.alpha == 0.0:
            break
        norm = float(np.linalg.norm(ev.gradient))
        if it == config.iterations or norm == 0.0:
            break
        stepped = current - config.step * ev.gradient / norm
        current = project_l2(x0, stepped, config.epsilon, config.box)

    outcome = _score_outcome(model, x0, best_x, partition, config, compiled, rule)
    return AttackResult(
        x_adv=best_x,
        x_orig=x0,
        objective=best_obj,
        best_iteration=best_it,
        trace=tuple(entries),
        l2_distance=float(np.linalg.norm(best_x - x0)),
        saturated=saturated,
        **outcome,
    )


def transfer_attack(
    surrogate: Model,
    target: Model,
    x: np.ndarray | Sequence[float],
    partition: ClassPartition,
    bound: KnowledgeLike,
    config: AttackConfig,
    rule: Optional[RejectionRule] = None,
) -> AttackResult:
    """Run the attack on the surrogate and score the adversarial point on the target."""
    if surrogate.layer_sizes[0] != target.layer_sizes[0]:
        raise DimensionMismatch("Surrogate and target take inputs of different dimension")
    if surrogate.layer_sizes[-1] != target.layer_sizes[-1]:
        raise DimensionMismatch("Surrogate and target predict different class counts")
    compiled = as_compiled(bound)
    result = mka(surrogate, x, partition, compiled, config)
    outcome = _score_outcome(target, result.x_orig, result.x_adv, partition, config, compiled, rule)
    return replace(result, **outcome)


def attack_dataset(
    model: Model,
    dataset: Dataset,
    bound: KnowledgeLike,
    config: AttackConfig,
    rule: Optional[RejectionRule] = None,
    surrogate: Optional[Model] = None,
) -> Tuple[Dataset, List[AttackResult]]:
    """
    Attack every row of a fully labeled dataset.

    In single-label mode the partition is taken over the main classes unless
    the config restricts it further. With a surrogate the attack is a transfer
    attack scored on ``model``.
    """
    compiled = as_compiled(bound)
    if config.single_label_mode and config.restrict_to is None:
        config = config.model_copy(update={"restrict_to": compiled.bound.main_classes})
    results: List[AttackResult] = []
    for x, labels in zip(dataset.samples, dataset.labels):
        partition = partition_from_labels(labels, config.restrict_to)
        if surrogate is None:
            results.append(mka(model, x, partition, compiled, config, rule))
        else:
            results.append(transfer_attack(surrogate, model, x, partition, compiled, config, rule))

    adversarial = dataset.with_samples(
        np.array([r.x_adv for r in results]).reshape(dataset.n, dataset.d)
    )
    log_event(
        "attack_finished",
        samples=dataset.n,
        epsilon=config.epsilon,
        alpha=config.alpha,
        transfer=surrogate is not None,
        misclassified=sum(r.misclassified for r in results),
    )
    return adversarial, results


@dataclass(frozen=True)
class AlphaSelection:
    best_alpha: float
    adversarial: Dataset
    results: Tuple[AttackResult, ...]
    scores: Tuple[Tuple[float, float, float], ...]


def select_alpha(
    model: Model,
    dataset: Dataset,
    bound: KnowledgeLike,
    config: AttackConfig,
    rule: Optional[RejectionRule] = None,
    grid: Sequence[float] = ALPHA_GRID,
    surrogate: Optional[Model] = None,
) -> AlphaSelection:
    """
    Attack the dataset once per alpha and keep the strongest run.

    A run scores the fraction of rows whose attack succeeded (misclassified
    and not rejected). Ties go to the lower mean knowledge measure on the
    adversarial points, then to the earlier alpha. ``scores`` holds
    (alpha, success rate, mean measure) per grid value.
    """
    if not grid:
        raise BadConfig("Alpha grid is empty")
    compiled = as_compiled(bound)
    runs: List[Tuple[float, float, float, Dataset, List[AttackResult]]] = []
    for alpha in grid:
        cfg = config.model_copy(update={"alpha": float(alpha)})
        adversarial, results = attack_dataset(model, dataset, compiled, cfg, rule, surrogate)
        success = float(np.mean([r.success for r in results]))
        measure = float(np.mean([r.measure for r in results]))
        runs.append((float(alpha), success, measure, adversarial, results))
        log_event("alpha_scored", alpha=float(alpha), success_rate=success, mean_measure=measure)
    best = min(runs, key=lambda run: (-run[1], run[2]))
    log_event("alpha_selected", alpha=best[0], epsilon=config.epsilon)
    return AlphaSelection(
        best_alpha=best[0],
        adversarial=best[3],
        results=tuple(best[4]),
        scores=tuple((run[0], run[1], run[2]) for run in runs),
    )


def write_trace_jsonl(results: Sequence[AttackResult]) -> str:
    lines = []
    for sample, result in enumerate(results):
        for entry in result.trace:
            lines.append(
                json.dumps(
                    {
                        "sample": sample,
                        "iteration": entry.iteration,
                        "objective": entry.objective,
                        "best_objective": entry.best_objective,
                        "constraint_loss": entry.constraint_loss,
                        "p": entry.p,
                        "n": entry.n,
                        "l2_distance": entry.l2_distance,
                    }
                )
            )
    return "".join(line + "\n" for line in lines)
