"""
Lowering of formulas to product T-norm polynomials.

Translation (no algebraic simplification):

    t(P_i)     = f_i
    t(not a)   = 1 - t(a)
    t(a and b) = t(a) * t(b)
    t(a or b)  = 1 - (1 - t(a)) * (1 - t(b))
    t(a => b)  = 1 - t(a) * (1 - t(b))

Each program keeps its expression tree (for inspection) and a Wengert list
built once at compile time. Evaluation runs the list forward on whole numpy
columns, so a batch of output vectors is scored in one pass; gradients run it
backwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, OutputRangeError
from .knowledge import (
    And,
    BoundKnowledge,
    Formula,
    Implies,
    Not,
    Or,
    Pred,
    WeightedFormula,
    predicates,
)

RANGE_TOLERANCE = 1e-9


class WeightSet(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Output:
    index: int
    name: str


@dataclass(frozen=True)
class OneMinus:
    child: "Node"


@dataclass(frozen=True)
class Product:
    left: "Node"
    right: "Node"


Node = Union[Output, OneMinus, Product]

# Tape opcodes
OUT, ONE_MINUS, PRODUCT = "out", "one_minus", "product"
Instruction = Tuple[str, Union[int, Tuple[int, int]]]


@dataclass(frozen=True)
class ConstraintProgram:
    root: Node
    tape: Tuple[Instruction, ...]
    width: int
    source: Optional[WeightedFormula] = None

    @property
    def formula(self) -> Optional[Formula]:
        return self.source.formula if self.source is not None else None


@dataclass(frozen=True)
class ConstraintLossReport:
    total: float
    per_formula: Tuple[Tuple[int, float], ...]
    per_sample: Optional[Tuple[float, ...]] = None


def _lower(formula: Formula, index_of: Mapping[str, int]) -> Node:
    if isinstance(formula, Pred):
        return Output(index_of[formula.name], formula.name)
    if isinstance(formula, Not):
        return OneMinus(_lower(formula.child, index_of))
    if isinstance(formula, And):
        return Product(_lower(formula.left, index_of), _lower(formula.right, index_of))
    if isinstance(formula, Or):
        left = OneMinus(_lower(formula.left, index_of))
        right = OneMinus(_lower(formula.right, index_of))
        return OneMinus(Product(left, right))
    if isinstance(formula, Implies):
        premise = _lower(formula.premise, index_of)
        violated = OneMinus(_lower(formula.conclusion, index_of))
        return OneMinus(Product(premise, violated))
    raise TypeError(f"Not a formula: {formula!r}")


def _linearize(root: Node) -> Tuple[Instruction, ...]:
    tape: List[Instruction] = []

    def emit(node: Node) -> int:
        if isinstance(node, Output):
            tape.append((OUT, node.index))
        elif isinstance(node, OneMinus):
            child = emit(node.child)
            tape.append((ONE_MINUS, child))
        else:
            left = emit(node.left)
            right = emit(node.right)
            tape.append((PRODUCT, (left, right)))
        return len(tape) - 1

    emit(root)
    return tuple(tape)


def compile_formula(
    formula: Union[Formula, WeightedFormula],
    index_of: Optional[Mapping[str, int]] = None,
) -> ConstraintProgram:
    """
    Compile a formula to a constraint program.

    Without ``index_of``, predicates are numbered in first-appearance order.
    """
    source = formula if isinstance(formula, WeightedFormula) else None
    ast = formula.formula if isinstance(formula, WeightedFormula) else formula
    if index_of is None:
        index_of = {name: i for i, name in enumerate(predicates(ast))}
    root = _lower(ast, index_of)
    width = max(index_of[name] for name in predicates(ast)) + 1
    return ConstraintProgram(root=root, tape=_linearize(root), width=width, source=source)


def to_sexpr(program: Union[ConstraintProgram, Node]) -> str:
    node = program.root if isinstance(program, ConstraintProgram) else program
    if isinstance(node, Output):
        return f"(out {node.index} {node.name})"
    if isinstance(node, OneMinus):
        return f"(one-minus {to_sexpr(node.child)})"
    return f"(product {to_sexpr(node.left)} {to_sexpr(node.right)})"


def _as_batch(
    outputs: np.ndarray | Sequence[float], width: int, exact: bool
) -> Tuple[np.ndarray, bool]:
    """Return (clamped 2-D batch, was_single_vector)."""
    arr = np.asarray(outputs, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"Expected a vector or a batch of vectors, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyBatch("Empty batch of outputs")
    if (exact and arr.shape[1] != width) or arr.shape[1] < width:
        raise DimensionMismatch(f"Expected {width} outputs per sample, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise OutputRangeError("Outputs contain non-finite values")
    if arr.min() < -RANGE_TOLERANCE or arr.max() > 1.0 + RANGE_TOLERANCE:
        raise OutputRangeError(
            f"Outputs outside [0, 1]: min={arr.min():.3g}, max={arr.max():.3g}"
        )
    return np.clip(arr, 0.0, 1.0), single


def _forward(tape: Sequence[Instruction], batch: np.ndarray) -> List[np.ndarray]:
    values: List[np.ndarray] = []
    for op, arg in tape:
        if op == OUT:
            values.append(batch[:, arg])
        elif op == ONE_MINUS:
            values.append(1.0 - values[arg])  # type: ignore[index]
        else:
            left, right = arg  # type: ignore[misc]
            values.append(values[left] * values[right])
    return values


def _backward(
    tape: Sequence[Instruction],
    values: Sequence[np.ndarray],
    upstream: np.ndarray,
    grad: np.ndarray,
) -> None:
    """Accumulate d(upstream * program)/d(outputs) into grad (n, c)."""
    adjoint: List[Optional[np.ndarray]] = [None] * len(tape)
    adjoint[-1] = upstream
    for k in range(len(tape) - 1, -1, -1):
        delta = adjoint[k]
        if delta is None:
            continue
        op, arg = tape[k]
        if op == OUT:
            grad[:, arg] += delta
        elif op == ONE_MINUS:
            _accumulate(adjoint, arg, -delta)  # type: ignore[arg-type]
        else:
            left, right = arg  # type: ignore[misc]
            _accumulate(adjoint, left, delta * values[right])
            _accumulate(adjoint, right, delta * values[left])


def _accumulate(adjoint: List[Optional[np.ndarray]], slot: int, delta: np.ndarray) -> None:
    current = adjoint[slot]
    adjoint[slot] = delta if current is None else current + delta


def truth_degree(
    program: ConstraintProgram, outputs: np.ndarray | Sequence[float]
) -> Union[float, np.ndarray]:
    """Truth degree in [0, 1]; a float for one vector, an array for a batch."""
    batch, single = _as_batch(outputs, program.width, exact=False)
    value = _forward(program.tape, batch)[-1]
    return float(value[0]) if single else value


def formula_loss(
    program: ConstraintProgram, outputs: np.ndarray | Sequence[float]
) -> Union[float, np.ndarray]:
    """1 - truth degree; 0 iff the formula is fully satisfied."""
    degree = truth_degree(program, outputs)
    return 1.0 - degree


class CompiledKnowledge:
    """Every formula of a bound knowledge base, compiled, with both weight vectors."""

    def __init__(self, bound: BoundKnowledge):
        self.bound = bound
        self.c = bound.c
        self.programs: Tuple[ConstraintProgram, ...] = tuple(
            compile_formula(wf, bound.index_of) for wf in bound.base.formulas
        )
        self.weights: Dict[WeightSet, np.ndarray] = {
            WeightSet.TRAIN: np.array([wf.weight_train for wf in bound.base.formulas]),
            WeightSet.TEST: np.array([wf.weight_test for wf in bound.base.formulas]),
        }

    def __len__(self) -> int:
        return len(self.programs)

    def gamma(self, weight_set: WeightSet | str) -> float:
        return float(self.weights[WeightSet(weight_set)].sum())

    def check_batch(self, outputs: np.ndarray | Sequence[float]) -> Tuple[np.ndarray, bool]:
        return _as_batch(outputs, self.c, exact=True)

    def formula_losses(self, outputs: np.ndarray | Sequence[float]) -> np.ndarray:
        """Unweighted per-formula losses, shape (n, l)."""
        batch, _ = self.check_batch(outputs)
        columns = [1.0 - _forward(p.tape, batch)[-1] for p in self.programs]
        return np.stack(columns, axis=1)

    def sample_losses(
        self, weight_set: WeightSet | str, outputs: np.ndarray | Sequence[float]
    ) -> np.ndarray:
        """Weighted sum over formulas for each sample, shape (n,)."""
        return self.formula_losses(outputs) @ self.weights[WeightSet(weight_set)]

    def grad(
        self, weight_set: WeightSet | str, outputs: np.ndarray | Sequence[float]
    ) -> np.ndarray:
        """Per-sample gradient of the weighted loss w.r.t. the outputs, shape (n, c)."""
        batch, _ = self.check_batch(outputs)
        mu = self.weights[WeightSet(weight_set)]
        grad = np.zeros_like(batch)
        for weight, program in zip(mu, self.programs):
            values = _forward(program.tape, batch)
            # loss = mu * (1 - phi)
            _backward(program.tape, values, np.full(batch.shape[0], -weight), grad)
        return grad


def compile_knowledge(bound: BoundKnowledge) -> CompiledKnowledge:
    return CompiledKnowledge(bound)


KnowledgeLike = Union[BoundKnowledge, CompiledKnowledge]


def as_compiled(knowledge: KnowledgeLike) -> CompiledKnowledge:
    if isinstance(knowledge, CompiledKnowledge):
        return knowledge
    return CompiledKnowledge(knowledge)


def constraint_loss(
    bound: KnowledgeLike,
    weight_set: WeightSet | str,
    batch: np.ndarray | Sequence[Sequence[float]],
    per_sample: bool = False,
) -> ConstraintLossReport:
    """Weighted, batch-averaged constraint loss."""
    compiled = as_compiled(bound)
    arr = np.asarray(batch, dtype=float)
    if arr.size == 0:
        raise EmptyBatch("constraint_loss needs at least one sample")
    if arr.ndim != 2:
        raise DimensionMismatch(f"Expected a batch of output vectors, got shape {arr.shape}")
    mu = compiled.weights[WeightSet(weight_set)]
    weighted = compiled.formula_losses(arr) * mu
    per_formula = tuple((h, float(v)) for h, v in enumerate(weighted.mean(axis=0)))
    sample_totals = weighted.sum(axis=1)
    return ConstraintLossReport(
        total=float(sample_totals.mean()),
        per_formula=per_formula,
        per_sample=tuple(float(v) for v in sample_totals) if per_sample else None,
    )


def grad_outputs(
    bound: KnowledgeLike,
    weight_set: WeightSet | str,
    outputs: np.ndarray | Sequence[float],
) -> np.ndarray:
    """Gradient of the single-sample weighted loss; (c,) for a vector, (n, c) for a batch."""
    compiled = as_compiled(bound)
    _, single = compiled.check_batch(outputs)
    grad = compiled.grad(weight_set, outputs)
    return grad[0] if single else grad
