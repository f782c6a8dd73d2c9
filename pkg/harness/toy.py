"""
Two-dimensional toy world with nested classes.

Each Gaussian component carries the class it was drawn for; the assignment map
turns that class into the full multi-hot label set (a CAT sample is also an
ANIMAL). The default layout puts the animal family on the left half of the
plane and the vehicle family on the right.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from shield.errors import BadConfig
from shield.logs import log_event
from shield.training import Dataset, Split, make_semisupervised

TOY_CLASSES: Tuple[str, ...] = ("CAT", "ANIMAL", "MOTORBIKE", "VEHICLE")


class GaussianComponent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    label: str
    mean: Tuple[float, ...]
    cov: Tuple[Tuple[float, ...], ...]
    count: int = Field(ge=1)

    @model_validator(mode="after")
    def _positive_definite(self) -> "GaussianComponent":
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (len(self.mean), len(self.mean)):
            d = len(self.mean)
            raise ValueError(f"Covariance of {self.label} must be {d}x{d}")
        if not np.allclose(cov, cov.T):
            raise ValueError(f"Covariance of {self.label} is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError(f"Covariance of {self.label} is not positive-definite") from None
        return self


def _isotropic(label: str, mean: Tuple[float, float], var: float, count: int) -> GaussianComponent:
    return GaussianComponent(label=label, mean=mean, cov=((var, 0.0), (0.0, var)), count=count)


def default_components() -> List[GaussianComponent]:
    return [
        _isotropic("CAT", (-2.0, 0.75), 0.2, 250),
        _isotropic("ANIMAL", (-2.0, -0.75), 0.2, 250),
        _isotropic("MOTORBIKE", (2.0, 0.75), 0.2, 250),
        _isotropic("VEHICLE", (2.0, -0.75), 0.2, 250),
    ]


def default_assignment() -> Dict[str, List[str]]:
    return {
        "CAT": ["CAT", "ANIMAL"],
        "ANIMAL": ["ANIMAL"],
        "MOTORBIKE": ["MOTORBIKE", "VEHICLE"],
        "VEHICLE": ["VEHICLE"],
    }


class ToyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    class_names: Tuple[str, ...] = TOY_CLASSES
    components: List[GaussianComponent] = Field(default_factory=default_components)
    assignment: Dict[str, List[str]] = Field(default_factory=default_assignment)
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    unlabeled_fraction: float = Field(default=0.7, ge=0.0, le=1.0)
    partial_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0

    @field_validator("split_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f <= 0.0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"Split fractions must be positive and sum to 1, got {value}")
        return value


def _label_rows(config: ToyConfig) -> Dict[str, np.ndarray]:
    index = {name: i for i, name in enumerate(config.class_names)}
    rows: Dict[str, np.ndarray] = {}
    for comp in config.components:
        if comp.label not in config.assignment:
            raise BadConfig(f"Component class {comp.label} has no label assignment")
        row = np.zeros(len(config.class_names), dtype=np.int8)
        for name in config.assignment[comp.label]:
            if name not in index:
                raise BadConfig(f"Assignment for {comp.label} names unknown class {name}")
            row[index[name]] = 1
        rows[comp.label] = row
    return rows


def gen_toy(config: ToyConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """Seeded train/validation/test splits; label hiding applies to the train split only."""
    if not config.components:
        raise BadConfig("Toy world needs at least one component")
    dims = {len(c.mean) for c in config.components}
    if len(dims) != 1:
        raise BadConfig(f"Components disagree on dimension: {sorted(dims)}")
    rows = _label_rows(config)

    rng = np.random.default_rng(config.seed)
    xs: List[np.ndarray] = []
    ys: List[np.ndarray] = []
    for comp in config.components:
        xs.append(rng.multivariate_normal(comp.mean, comp.cov, size=comp.count))
        ys.append(np.tile(rows[comp.label], (comp.count, 1)))
    samples = np.concatenate(xs)
    labels = np.concatenate(ys)
    order = rng.permutation(samples.shape[0])
    samples, labels = samples[order], labels[order]

    n = samples.shape[0]
    n_train = int(n * config.split_fractions[0])
    n_val = int(n * config.split_fractions[1])
    if min(n_train, n_val, n - n_train - n_val) < 1:
        raise BadConfig(f"{n} samples are too few to fill three splits")
    cut = (slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, n))
    names = config.class_names

    train = Dataset(samples[cut[0]], labels[cut[0]], Split.TRAIN, names)
    val = Dataset(samples[cut[1]], labels[cut[1]], Split.VALIDATION, names)
    test = Dataset(samples[cut[2]], labels[cut[2]], Split.TEST, names)
    train = make_semisupervised(
        train,
        percent_labeled=100.0 * (1.0 - config.unlabeled_fraction),
        percent_partial=100.0 * config.partial_fraction,
        seed=config.seed + 1,
    )
    log_event("toy_generated", train=train.n, val=val.n, test=test.n, seed=config.seed)
    return train, val, test
