"""
Experiment configuration.

A YAML file with one mapping per section (knowledge, model, toy, train,
defense, attack, sweep). Every key can be overridden from the command line
with ``--set section.key=value``; the value is read as a YAML scalar, so
``--set attack.kappa=.inf`` and ``--set train.epochs=5`` both work.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Any, Dict, Iterable, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from shield.attack import AttackConfig
from shield.defense import DEFAULT_TARGET_RATE, PairingConfig
from shield.errors import BadConfig
from shield.training import TrainConfig

from .toy import ToyConfig


class KnowledgeSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: str = "kb/toy.kb"
    classes: Optional[str] = None
    main: Optional[Union[int, List[str]]] = None
    drop: List[str] = Field(default_factory=list)


class ModelSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [32, 32])
    activation: Literal["relu", "tanh"] = "relu"
    seed: int = 0
    surrogate_seed: int = 1


class DefenseSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    target_rate: float = Field(default=DEFAULT_TARGET_RATE, ge=0.0, lt=1.0)
    pairing: PairingConfig = Field(default_factory=PairingConfig)


class SweepSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilons: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    primary_metric: Literal["acc_main", "macro_f1"] = "macro_f1"
    taus: List[float] = Field(default_factory=list)
    alpha_grid: List[Annotated[float, Field(ge=0.0)]] = Field(default_factory=list)

    @field_validator("epsilons")
    @classmethod
    def _ascending_from_zero(cls, value: List[float]) -> List[float]:
        if not value or value[0] != 0.0 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("Epsilons must start at 0 and increase strictly")
        return value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    knowledge: KnowledgeSection = Field(default_factory=KnowledgeSection)
    model: ModelSection = Field(default_factory=ModelSection)
    toy: ToyConfig = Field(default_factory=ToyConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    attack: AttackConfig = Field(default_factory=lambda: AttackConfig(epsilon=0.5))
    sweep: SweepSection = Field(default_factory=SweepSection)


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise BadConfig(f"Override must look like section.key=value, got {assignment!r}")
    path = [part.strip() for part in key.split(".")]
    if len(path) < 2 or not all(path):
        raise BadConfig(f"Override key must name a section and a key, got {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise BadConfig(f"Cannot read override value {raw!r}: {exc}") from None

    node = data
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise BadConfig(f"Override {key!r} descends into a non-mapping value")
        node = child
    node[path[-1]] = value


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise BadConfig(f"Cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise BadConfig(f"Config {path} is not valid YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise BadConfig(f"Config {path} must be a mapping of sections")
        data = loaded or {}
    for assignment in overrides:
        apply_override(data, assignment)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise BadConfig(f"Invalid configuration: {problems}") from None
