"""Tests for product T-norm lowering, constraint losses and their gradients."""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

from shield.compiler import (
    OneMinus,
    Output,
    Product,
    WeightSet,
    compile_formula,
    compile_knowledge,
    constraint_loss,
    formula_loss,
    grad_outputs,
    to_sexpr,
    truth_degree,
)
from shield.errors import DimensionMismatch, EmptyBatch, OutputRangeError
from shield.knowledge import (
    And,
    Implies,
    KnowledgeBase,
    Not,
    Or,
    Pred,
    WeightedFormula,
    bind_predicates,
    boolean_eval,
    parse_formula,
    parse_knowledge_file,
    predicates,
)

A, B, C = Pred("A"), Pred("B"), Pred("C")


def test_disjunction_at_half():
    """a or b at (0.5, 0.5) is 1 - 0.25."""
    assert truth_degree(compile_formula(Or(A, B)), [0.5, 0.5]) == pytest.approx(0.75)


def test_conjunction_and_negation():
    assert truth_degree(compile_formula(And(A, B)), [0.5, 0.4]) == pytest.approx(0.2)
    assert truth_degree(compile_formula(Not(A)), [0.3]) == pytest.approx(0.7)


def test_implication_degree():
    program = compile_formula(Implies(A, B))
    assert truth_degree(program, [0.8, 0.25]) == pytest.approx(1 - 0.8 * 0.75)
    assert formula_loss(program, [1.0, 0.0]) == pytest.approx(1.0)
    assert formula_loss(program, [0.0, 0.0]) == pytest.approx(0.0)


def test_lowering_has_no_simplification():
    """A double negation survives as two one-minus nodes."""
    program = compile_formula(Not(Not(A)))
    assert program.root == OneMinus(OneMinus(Output(0, "A")))
    assert to_sexpr(program) == "(one-minus (one-minus (out 0 A)))"


def test_lowering_of_implication_tree():
    program = compile_formula(Implies(A, B), {"A": 3, "B": 1})
    assert program.root == OneMinus(Product(Output(3, "A"), OneMinus(Output(1, "B"))))
    assert program.width == 4


def test_tape_matches_tree():
    """The linear tape ends in the root and references only earlier slots."""
    program = compile_formula(parse_formula("A(x) and B(x) or not C(x) => A(x)"))
    for k, (op, arg) in enumerate(program.tape):
        refs = arg if isinstance(arg, tuple) else ((arg,) if op != "out" else ())
        assert all(r < k for r in refs)
    assert program.tape[-1][0] == "one_minus"


def test_boolean_agreement_on_vertices():
    """On 0/1 outputs the truth degree equals the classical truth value."""
    formulas = [
        parse_formula("A(x) => B(x) or not C(x)"),
        parse_formula("(A(x) and B(x)) or (not A(x) and C(x))"),
        parse_formula("not (A(x) => B(x)) => C(x)"),
    ]
    index_of = {"A": 0, "B": 1, "C": 2}
    for formula in formulas:
        program = compile_formula(formula, index_of)
        for values in itertools.product([0, 1], repeat=3):
            assignment = dict(zip("ABC", map(bool, values)))
            expected = 1.0 if boolean_eval(formula, assignment) else 0.0
            assert truth_degree(program, np.array(values, dtype=float)) == expected


def test_degree_stays_in_unit_interval():
    rng = np.random.default_rng(5)
    program = compile_formula(parse_formula("A(x) => (B(x) and not C(x)) or A(x)"))
    degrees = truth_degree(program, rng.random((500, 3)))
    assert degrees.shape == (500,)
    assert degrees.min() >= 0.0 and degrees.max() <= 1.0


def test_toy_loss_of_cat_without_animal(toy_bound):
    """CAT without ANIMAL breaks exactly one unit-weight rule."""
    report = constraint_loss(toy_bound, WeightSet.TRAIN, [[1.0, 0.0, 0.0, 0.0]])
    assert report.total == pytest.approx(1.0)
    assert report.per_formula[0] == (0, pytest.approx(1.0))
    assert all(v == pytest.approx(0.0) for _, v in report.per_formula[1:])


def test_toy_loss_zero_on_consistent_output(toy_bound):
    report = constraint_loss(toy_bound, "train", [[1, 1, 0, 0], [0, 0, 1, 1]], per_sample=True)
    assert report.total == pytest.approx(0.0)
    assert report.per_sample == (pytest.approx(0.0), pytest.approx(0.0))


def test_loss_is_batch_mean(toy_compiled):
    batch = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    report = constraint_loss(toy_compiled, WeightSet.TRAIN, batch, per_sample=True)
    # the all-zero row violates only the disjunction
    assert report.per_sample == (pytest.approx(1.0), pytest.approx(1.0))
    assert report.total == pytest.approx(1.0)


def test_weights_per_set():
    base = parse_knowledge_file("w=2,0.5 : A(x) => B(x)\n")
    compiled = compile_knowledge(bind_predicates(base, ["A", "B"]))
    assert compiled.gamma("train") == 2.0
    assert compiled.gamma(WeightSet.TEST) == 0.5
    outputs = np.array([[1.0, 0.0]])
    assert compiled.sample_losses("train", outputs)[0] == pytest.approx(2.0)
    assert compiled.sample_losses("test", outputs)[0] == pytest.approx(0.5)


def test_gradient_of_implication():
    """d(1 - (1 - a(1-b)))/d(a, b) = (1 - b, -a)."""
    base = parse_knowledge_file("A(x) => B(x)\n")
    bound = bind_predicates(base, ["A", "B"])
    grad = grad_outputs(bound, WeightSet.TRAIN, [0.7, 0.2])
    np.testing.assert_allclose(grad, [0.8, -0.7])


def test_gradient_matches_finite_differences(animals_bound):
    compiled = compile_knowledge(animals_bound)
    rng = np.random.default_rng(9)
    outputs = rng.uniform(0.05, 0.95, size=(3, compiled.c))
    grad = compiled.grad(WeightSet.TRAIN, outputs)
    h = 1e-6
    for j in (0, 4, 7, 20, 32):
        plus, minus = outputs.copy(), outputs.copy()
        plus[:, j] += h
        minus[:, j] -= h
        numeric = (
            compiled.sample_losses("train", plus) - compiled.sample_losses("train", minus)
        ) / (2 * h)
        np.testing.assert_allclose(grad[:, j], numeric, rtol=1e-4, atol=1e-6)


def test_gradient_zero_for_unmentioned_output():
    base = parse_knowledge_file("A(x) => B(x)\n")
    bound = bind_predicates(base, ["A", "B", "C"])
    grad = grad_outputs(bound, WeightSet.TRAIN, [[0.5, 0.5, 0.5], [0.1, 0.9, 0.2]])
    assert grad.shape == (2, 3)
    assert np.all(grad[:, 2] == 0.0)


def test_formula_losses_shape(animals_bound):
    compiled = compile_knowledge(animals_bound)
    losses = compiled.formula_losses(np.full((5, 33), 0.5))
    assert losses.shape == (5, len(animals_bound.base))
    assert len(compiled) == 18


def test_rejects_wrong_width(toy_compiled):
    with pytest.raises(DimensionMismatch, match="Expected 4 outputs"):
        toy_compiled.sample_losses("train", np.zeros((2, 3)))


def test_rejects_out_of_range(toy_compiled):
    with pytest.raises(OutputRangeError):
        toy_compiled.sample_losses("train", [[0.0, 1.5, 0.0, 0.0]])
    with pytest.raises(OutputRangeError, match="non-finite"):
        toy_compiled.sample_losses("train", [[0.0, np.nan, 0.0, 0.0]])


def test_tolerates_rounding_noise(toy_compiled):
    losses = toy_compiled.sample_losses("train", [[1.0 + 1e-12, 1.0, -1e-12, 0.0]])
    assert losses[0] == pytest.approx(0.0)


def test_empty_batch(toy_bound):
    with pytest.raises(EmptyBatch):
        constraint_loss(toy_bound, "train", np.zeros((0, 4)))


def test_first_appearance_numbering():
    formula = parse_formula("B(x) => A(x)")
    program = compile_formula(formula)
    assert predicates(formula) == ("B", "A")
    assert program.root == OneMinus(Product(Output(0, "B"), OneMinus(Output(1, "A"))))


CRISP_EXHAUSTIVE_WIDTH = 12
KB_DIR = Path(__file__).resolve().parent.parent / "kb"


def _shipped_formulas():
    params = []
    for stem in ("toy", "animals"):
        base = parse_knowledge_file((KB_DIR / f"{stem}.kb").read_text(encoding="utf-8"))
        for h, wf in enumerate(base.formulas):
            width = len(predicates(wf.formula))
            marks = [pytest.mark.slow] if width > CRISP_EXHAUSTIVE_WIDTH else []
            params.append(pytest.param(wf.formula, id=f"{stem}-{h}", marks=marks))
    return params


SHIPPED_FORMULAS = _shipped_formulas()


def _crisp_columns(formula, columns):
    """Vectorised two-valued evaluation over boolean columns."""
    if isinstance(formula, Pred):
        return columns[formula.name]
    if isinstance(formula, Not):
        return ~_crisp_columns(formula.child, columns)
    if isinstance(formula, And):
        return _crisp_columns(formula.left, columns) & _crisp_columns(formula.right, columns)
    if isinstance(formula, Or):
        return _crisp_columns(formula.left, columns) | _crisp_columns(formula.right, columns)
    return ~_crisp_columns(formula.premise, columns) | _crisp_columns(formula.conclusion, columns)


@pytest.mark.parametrize("formula", SHIPPED_FORMULAS)
def test_shipped_formulas_agree_with_boolean_semantics(formula):
    """Every 0/1 assignment of a shipped formula scores exactly its classical truth value."""
    names = predicates(formula)
    program = compile_formula(formula)
    k = len(names)
    if k <= CRISP_EXHAUSTIVE_WIDTH:
        for values in itertools.product([0, 1], repeat=k):
            expected = 1.0 if boolean_eval(formula, dict(zip(names, map(bool, values)))) else 0.0
            assert truth_degree(program, np.array(values, dtype=float)) == expected
        return
    chunk = 1 << 16
    shifts = np.arange(k, dtype=np.int64)
    for start in range(0, 1 << k, chunk):
        index = np.arange(start, min(start + chunk, 1 << k), dtype=np.int64)
        bits = ((index[:, None] >> shifts) & 1).astype(bool)
        expected = _crisp_columns(formula, {n: bits[:, j] for j, n in enumerate(names)})
        degrees = truth_degree(program, bits.astype(float))
        np.testing.assert_array_equal(degrees, expected.astype(float))


@pytest.mark.parametrize("knowledge", ["toy_bound", "animals_bound"])
def test_shipped_knowledge_stays_in_range(knowledge, request):
    compiled = compile_knowledge(request.getfixturevalue(knowledge))
    rng = np.random.default_rng(21)
    outputs = rng.random((10_000, compiled.c))
    degrees = 1.0 - compiled.formula_losses(outputs)
    assert degrees.min() >= 0.0 and degrees.max() <= 1.0
    for weight_set in WeightSet:
        totals = compiled.sample_losses(weight_set, outputs)
        assert totals.min() >= 0.0
        assert totals.max() <= compiled.gamma(weight_set)


@pytest.mark.parametrize("knowledge", ["toy_bound", "animals_bound"])
def test_equal_weight_sets_give_equal_losses(knowledge, request):
    compiled = compile_knowledge(request.getfixturevalue(knowledge))
    weights = compiled.weights
    np.testing.assert_array_equal(weights[WeightSet.TRAIN], weights[WeightSet.TEST])
    outputs = np.random.default_rng(4).random((200, compiled.c))
    np.testing.assert_array_equal(
        compiled.sample_losses(WeightSet.TRAIN, outputs),
        compiled.sample_losses(WeightSet.TEST, outputs),
    )
    np.testing.assert_array_equal(
        compiled.grad(WeightSet.TRAIN, outputs), compiled.grad(WeightSet.TEST, outputs)
    )


def test_implication_loss_is_monotone():
    """Raising the premise never lowers the loss; raising the conclusion never raises it."""
    program = compile_formula(Implies(A, B))
    rng = np.random.default_rng(13)
    base = rng.random((1000, 2))
    for column, sign in ((0, 1.0), (1, -1.0)):
        raised = base.copy()
        raised[:, column] += rng.random(1000) * (1.0 - base[:, column])
        delta = formula_loss(program, raised) - formula_loss(program, base)
        assert np.all(sign * delta >= -1e-15)


def _single_formula_knowledge(formula):
    base = KnowledgeBase((WeightedFormula(formula),))
    return compile_knowledge(bind_predicates(base, list(predicates(formula))))


def test_gradient_matches_finite_differences_on_many_formulas():
    """Central differences agree with the analytic gradient on 100 (formula, output) pairs."""
    formulas = [p.values[0] for p in SHIPPED_FORMULAS] + [
        parse_formula("A(x) => (B(x) and not C(x)) or A(x)"),
        parse_formula("not (A(x) => B(x)) => C(x)"),
        parse_formula("(A(x) and B(x)) or (not A(x) and C(x))"),
    ]
    compiled = [_single_formula_knowledge(f) for f in formulas]
    rng = np.random.default_rng(17)
    h = 1e-5
    for trial in range(100):
        knowledge = compiled[trial % len(compiled)]
        point = rng.uniform(0.02, 0.3, size=(1, knowledge.c))
        analytic = knowledge.grad(WeightSet.TRAIN, point)[0]
        numeric = np.empty(knowledge.c)
        for j in range(knowledge.c):
            plus, minus = point.copy(), point.copy()
            plus[0, j] += h
            minus[0, j] -= h
            numeric[j] = (
                knowledge.sample_losses("train", plus)[0]
                - knowledge.sample_losses("train", minus)[0]
            ) / (2 * h)
        scale = np.abs(analytic).max()
        assert np.abs(analytic - numeric).max() <= 1e-6 * scale, formulas[trial % len(formulas)]
