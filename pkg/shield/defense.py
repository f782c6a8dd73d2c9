"""
Rejection defense built on the test-time knowledge measure.

A sample is rejected when its test-weighted constraint loss is strictly above
a threshold tau, calibrated on clean validation data so that a target share
of clean samples is rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .compiler import CompiledKnowledge, KnowledgeLike, WeightSet, as_compiled
from .errors import BadConfig, EmptySet, NoMainClasses
from .logs import log_event
from .metrics import main_predictions
from .net import Model, predict_outputs
from .training import Dataset

TAU_FLOOR = 1e-12
DEFAULT_TARGET_RATE = 0.10
RULE_FORMAT_VERSION = "tnorm-shield-rule-v1"


def knowledge_measure(
    model: Model, x: np.ndarray | Sequence[float], bound: KnowledgeLike
) -> Union[float, np.ndarray]:
    """Test-weighted constraint loss of f(x); a float for one input, an array for a batch."""
    compiled = as_compiled(bound)
    outputs = predict_outputs(model, x)
    measures = compiled.sample_losses(WeightSet.TEST, outputs)
    return float(measures[0]) if np.ndim(outputs) == 1 else measures


@dataclass(frozen=True)
class RejectionRule:
    tau: float
    knowledge: CompiledKnowledge
    target_rate: float = DEFAULT_TARGET_RATE
    weight_set: WeightSet = WeightSet.TEST
    calibration_reject_rate: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.tau > 0.0:
            raise BadConfig(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.target_rate < 1.0:
            raise BadConfig(f"Target reject rate must lie in [0, 1), got {self.target_rate}")

    @property
    def knowledge_digest(self) -> str:
        return self.knowledge.bound.base.digest

    def with_tau(self, tau: float) -> "RejectionRule":
        return replace(self, tau=tau, calibration_reject_rate=None)


@dataclass(frozen=True)
class RejectionDecision:
    reject: bool
    measure: float


def calibrate_tau(
    model: Model,
    validation: Dataset,
    bound: KnowledgeLike,
    target_rate: float = DEFAULT_TARGET_RATE,
) -> RejectionRule:
    """tau = (1 - target_rate) quantile of the clean measures, floored at TAU_FLOOR."""
    if validation.n == 0:
        raise EmptySet("Calibration set is empty")
    if not 0.0 <= target_rate < 1.0:
        raise BadConfig(f"Target reject rate must lie in [0, 1), got {target_rate}")
    compiled = as_compiled(bound)
    measures = np.asarray(knowledge_measure(model, validation.samples, compiled))
    tau = max(float(np.quantile(measures, 1.0 - target_rate, method="linear")), TAU_FLOOR)
    rate = float(np.mean(measures > tau))
    log_event("tau_calibrated", tau=tau, target_rate=target_rate, reject_rate=rate, n=validation.n)
    return RejectionRule(
        tau=tau, knowledge=compiled, target_rate=target_rate, calibration_reject_rate=rate
    )


def should_reject(
    rule: RejectionRule, model: Model, x: np.ndarray | Sequence[float]
) -> RejectionDecision:
    x = np.asarray(x, dtype=float).reshape(-1)
    measure = float(knowledge_measure(model, x, rule.knowledge))
    return RejectionDecision(reject=measure > rule.tau, measure=measure)


def reject_mask(
    rule: RejectionRule, model: Model, samples: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Reject flags and measures for a batch (n, d)."""
    measures = np.asarray(knowledge_measure(model, np.atleast_2d(samples), rule.knowledge))
    return measures > rule.tau, measures


class PairingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_samples: int = Field(default=1000, ge=1)
    margin: float = Field(default=0.25, ge=0.0)
    seed: int = 0


def pairing_gap(
    model: Model, bound: KnowledgeLike, probe: np.ndarray, reference: np.ndarray
) -> float:
    """|mean measure over probe - mean measure over reference|."""
    if len(probe) == 0 or len(reference) == 0:
        raise EmptySet("Pairing needs two non-empty sample sets")
    compiled = as_compiled(bound)
    probe_mean = float(np.mean(knowledge_measure(model, np.atleast_2d(probe), compiled)))
    ref_mean = float(np.mean(knowledge_measure(model, np.atleast_2d(reference), compiled)))
    return abs(probe_mean - ref_mean)


def sample_support_box(samples: np.ndarray, config: PairingConfig) -> np.ndarray:
    """Uniform draws from the per-dimension bounding box widened by the margin fraction."""
    lo = samples.min(axis=0)
    hi = samples.max(axis=0)
    pad = config.margin * (hi - lo)
    rng = np.random.default_rng(config.seed)
    return rng.uniform(lo - pad, hi + pad, size=(config.num_samples, samples.shape[1]))


def pairing_score(
    model: Model,
    train_set: Dataset,
    bound: KnowledgeLike,
    config: Optional[PairingConfig] = None,
) -> float:
    config = config or PairingConfig()
    if train_set.n == 0:
        raise EmptySet("Pairing needs a non-empty training set")
    probe = sample_support_box(train_set.samples, config)
    zeta = pairing_gap(model, bound, probe, train_set.samples)
    log_event("pairing_scored", zeta=zeta, num_samples=config.num_samples, seed=config.seed)
    return zeta


@dataclass(frozen=True)
class SingleLabelView:
    main_class: int
    reject: bool
    measure: float
    outputs: np.ndarray


def single_label_view(
    model: Model,
    bound: KnowledgeLike,
    x: np.ndarray | Sequence[float],
    rule: Optional[RejectionRule] = None,
) -> SingleLabelView:
    """
    User-facing prediction: the winning main class, with auxiliary outputs used
    only by the rejection check. Without a rule nothing is rejected.
    """
    compiled = as_compiled(bound)
    main = compiled.bound.main_classes
    if not main:
        raise NoMainClasses("Knowledge binding has no main classes")
    outputs = predict_outputs(model, np.asarray(x, dtype=float).reshape(-1))
    measure = float(compiled.sample_losses(WeightSet.TEST, outputs)[0])
    reject = rule is not None and measure > rule.tau
    return SingleLabelView(
        main_class=int(main_predictions(outputs, main)[0]),
        reject=reject,
        measure=measure,
        outputs=outputs,
    )


def save_rule(rule: RejectionRule, path: Union[str, Path]) -> None:
    doc = {
        "version": RULE_FORMAT_VERSION,
        "tau": rule.tau,
        "target_rate": rule.target_rate,
        "weight_set": rule.weight_set.value,
        "knowledge_digest": rule.knowledge_digest,
        "calibration_reject_rate": rule.calibration_reject_rate,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    log_event("rule_saved", path=str(path), tau=rule.tau)


def load_rule(path: Union[str, Path], bound: KnowledgeLike) -> RejectionRule:
    """Read a rule and check it was calibrated against the same knowledge."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadConfig(f"Rule file is not valid JSON: {exc}") from None
    if doc.get("version") != RULE_FORMAT_VERSION:
        raise BadConfig(f"Unsupported rule version {doc.get('version')!r}")
    compiled = as_compiled(bound)
    if doc.get("knowledge_digest") != compiled.bound.base.digest:
        raise BadConfig("Rule was calibrated against different knowledge")
    try:
        return RejectionRule(
            tau=float(doc["tau"]),
            knowledge=compiled,
            target_rate=float(doc["target_rate"]),
            weight_set=WeightSet(doc.get("weight_set", WeightSet.TEST.value)),
            calibration_reject_rate=doc.get("calibration_reject_rate"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BadConfig):
            raise
        raise BadConfig(f"Malformed rule file: {exc}") from None
