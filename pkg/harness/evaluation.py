"""
Classification quality with and without rejection, epsilon sweeps and
rejection-threshold curves.

Scoring convention: on clean data (epsilon = 0) a rejected sample is treated
as assigned to an unknown class, so it counts as wrong. On attacked data a
rejected sample counts as correctly handled.
"""

from __future__ import annotations

import csv
import io
from typing import Annotated, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from shield.attack import AttackConfig, attack_dataset, select_alpha
from shield.compiler import KnowledgeLike, WeightSet, as_compiled
from shield.defense import RejectionRule, reject_mask
from shield.errors import BadConfig, EmptySet, Misaligned
from shield.logs import log_event
from shield.metrics import (
    acc_main_from_outputs,
    is_single_label,
    macro_f1_from_predictions,
    main_predictions,
    main_targets,
)
from shield.net import Model, predict_outputs
from shield.training import Dataset

PrimaryMetric = Literal["acc_main", "macro_f1"]
Rate = Annotated[float, Field(ge=0.0, le=1.0)]


class EvalReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(ge=0.0)
    primary_metric: PrimaryMetric
    quality_with_rejection: Rate
    quality_without_rejection: Rate
    macro_f1: Rate
    acc_main: Optional[Rate] = None
    reject_rate_clean: Rate
    reject_rate_adversarial: Rate
    mean_measure_clean: float = Field(ge=0.0)
    mean_measure_adversarial: float = Field(ge=0.0)
    pairing: Optional[float] = None
    n: int = Field(ge=1)
    alpha: Optional[float] = Field(default=None, ge=0.0)


SWEEP_COLUMNS = (
    "epsilon",
    "primary_metric",
    "quality_with_rejection",
    "quality_without_rejection",
    "macro_f1",
    "acc_main",
    "reject_rate_clean",
    "reject_rate_adversarial",
    "mean_measure_clean",
    "mean_measure_adversarial",
    "pairing",
    "n",
    "alpha",
)


def _check_aligned(clean: Dataset, adversarial: Dataset) -> None:
    if clean.n == 0:
        raise EmptySet("Nothing to evaluate")
    if clean.n != adversarial.n or clean.d != adversarial.d:
        raise Misaligned(
            f"Clean set is {clean.n}x{clean.d}, adversarial set is {adversarial.n}x{adversarial.d}"
        )
    if not np.array_equal(clean.labels, adversarial.labels):
        raise Misaligned("Clean and adversarial labels differ row by row")


def _quality(
    outputs: np.ndarray,
    labels: np.ndarray,
    main: Sequence[int],
    metric: PrimaryMetric,
    rejected: Optional[np.ndarray] = None,
    rejected_counts_correct: bool = False,
) -> float:
    if metric == "acc_main":
        correct = main_predictions(outputs, main) == main_targets(labels, main)
        if rejected is not None:
            correct = np.where(rejected, rejected_counts_correct, correct)
        return float(np.mean(correct))

    predictions = outputs > 0.5
    if rejected is not None:
        substitute = labels == 1 if rejected_counts_correct else np.zeros_like(predictions)
        predictions = np.where(rejected[:, None], substitute, predictions)
    return macro_f1_from_predictions(predictions, labels)


def classification_quality(
    model: Model,
    rule: RejectionRule,
    clean: Dataset,
    adversarial: Dataset,
    epsilon: float,
    primary_metric: PrimaryMetric = "macro_f1",
    pairing: Optional[float] = None,
) -> EvalReport:
    _check_aligned(clean, adversarial)
    main = rule.knowledge.bound.main_classes
    attacked = epsilon > 0.0
    evaluated = adversarial if attacked else clean

    clean_flags, clean_measures = reject_mask(rule, model, clean.samples)
    if attacked:
        adv_flags, adv_measures = reject_mask(rule, model, adversarial.samples)
    else:
        adv_flags, adv_measures = clean_flags, clean_measures
    flags = adv_flags if attacked else clean_flags

    outputs = predict_outputs(model, evaluated.samples)
    labels = evaluated.labels
    return EvalReport(
        epsilon=epsilon,
        primary_metric=primary_metric,
        quality_with_rejection=_quality(outputs, labels, main, primary_metric, flags, attacked),
        quality_without_rejection=_quality(outputs, labels, main, primary_metric),
        macro_f1=macro_f1_from_predictions(outputs > 0.5, labels),
        acc_main=(
            acc_main_from_outputs(outputs, labels, main) if is_single_label(labels, main) else None
        ),
        reject_rate_clean=float(np.mean(clean_flags)),
        reject_rate_adversarial=float(np.mean(adv_flags)),
        mean_measure_clean=float(np.mean(clean_measures)),
        mean_measure_adversarial=float(np.mean(adv_measures)),
        pairing=pairing,
        n=clean.n,
    )


def sweep(
    model: Model,
    rule: RejectionRule,
    bound: KnowledgeLike,
    dataset: Dataset,
    epsilons: Sequence[float],
    attack_template: AttackConfig,
    surrogate: Optional[Model] = None,
    primary_metric: PrimaryMetric = "macro_f1",
    pairing: Optional[float] = None,
    alpha_grid: Sequence[float] = (),
) -> List[EvalReport]:
    """
    One report per epsilon. The epsilon = 0 row scores the unattacked data;
    every other row attacks the dataset afresh (by transfer when a surrogate
    is given). With an ``alpha_grid`` each attacked row uses the alpha that
    ``select_alpha`` picks at that epsilon.
    """
    eps = [float(e) for e in epsilons]
    if not eps or eps[0] != 0.0 or any(b <= a for a, b in zip(eps, eps[1:])):
        raise BadConfig(f"Epsilons must start at 0 and increase strictly, got {eps}")
    compiled = as_compiled(bound)
    reports: List[EvalReport] = []
    for epsilon in eps:
        alpha: Optional[float] = None
        if epsilon == 0.0:
            adversarial = dataset
        elif alpha_grid:
            config = attack_template.model_copy(update={"epsilon": epsilon})
            selection = select_alpha(model, dataset, compiled, config, rule, alpha_grid, surrogate)
            adversarial, alpha = selection.adversarial, selection.best_alpha
        else:
            config = attack_template.model_copy(update={"epsilon": epsilon})
            adversarial, _ = attack_dataset(model, dataset, compiled, config, rule, surrogate)
            alpha = config.alpha
        report = classification_quality(
            model, rule, dataset, adversarial, epsilon, primary_metric, pairing
        ).model_copy(update={"alpha": alpha})
        reports.append(report)
        log_event(
            "sweep_row",
            epsilon=epsilon,
            alpha=alpha,
            quality_with_rejection=report.quality_with_rejection,
            quality_without_rejection=report.quality_without_rejection,
        )
    return reports


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_sweep_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for report in reports:
        row = report.model_dump()
        writer.writerow([_cell(row[col]) for col in SWEEP_COLUMNS])
    return buf.getvalue()


class RejectionCurvePoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float = Field(gt=0.0)
    reject_rate_clean: Rate
    reject_rate_adversarial: Rate
    quality_clean: Rate
    quality_adversarial: Rate


CURVE_COLUMNS = (
    "tau",
    "reject_rate_clean",
    "reject_rate_adversarial",
    "quality_clean",
    "quality_adversarial",
)


def rejection_curve(
    model: Model,
    bound: KnowledgeLike,
    clean: Dataset,
    adversarial: Dataset,
    taus: Sequence[float],
    primary_metric: PrimaryMetric = "macro_f1",
) -> List[RejectionCurvePoint]:
    """Reject rates and quality on clean and attacked data for each threshold."""
    _check_aligned(clean, adversarial)
    compiled = as_compiled(bound)
    main = compiled.bound.main_classes
    clean_out = predict_outputs(model, clean.samples)
    adv_out = predict_outputs(model, adversarial.samples)
    clean_measures = compiled.sample_losses(WeightSet.TEST, clean_out)
    adv_measures = compiled.sample_losses(WeightSet.TEST, adv_out)

    points: List[RejectionCurvePoint] = []
    for tau in taus:
        rule = RejectionRule(tau=float(tau), knowledge=compiled)
        clean_flags = clean_measures > rule.tau
        adv_flags = adv_measures > rule.tau
        points.append(
            RejectionCurvePoint(
                tau=rule.tau,
                reject_rate_clean=float(np.mean(clean_flags)),
                reject_rate_adversarial=float(np.mean(adv_flags)),
                quality_clean=_quality(
                    clean_out, clean.labels, main, primary_metric, clean_flags, False
                ),
                quality_adversarial=_quality(
                    adv_out, adversarial.labels, main, primary_metric, adv_flags, True
                ),
            )
        )
    return points


def write_rejection_curve_csv(points: Sequence[RejectionCurvePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for point in points:
        row = point.model_dump()
        writer.writerow([_cell(row[col]) for col in CURVE_COLUMNS])
    return buf.getvalue()
