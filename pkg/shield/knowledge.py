"""
Domain knowledge: formula ASTs, the knowledge-file parser, mutual-exclusion
macros and binding of predicate names to classifier outputs.

Formulas are monadic and single-variable: every top-level sentence is
implicitly universally quantified over the classifier input.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from lark import Lark, Token, Transformer, v_args
from lark.exceptions import (
    UnexpectedCharacters,
    UnexpectedEOF,
    UnexpectedInput,
    UnexpectedToken,
    VisitError,
)

from .errors import (
    ArityError,
    BadConfig,
    DuplicateClass,
    DuplicateDirective,
    EmptyKnowledge,
    FormulaSyntaxError,
    MissingAssignment,
    ShieldError,
    UnboundPredicate,
    UnknownToken,
)
from .logs import log_event

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pred:
    name: str

    def __post_init__(self) -> None:
        if not IDENT_RE.match(self.name):
            raise FormulaSyntaxError(f"Invalid predicate name {self.name!r}")


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    premise: "Formula"
    conclusion: "Formula"


Formula = Union[Pred, Not, And, Or, Implies]
BINARY = (And, Or, Implies)


class MutualExclusionEncoding(str, Enum):
    TRUTH_TABLE = "truthtable"
    PAIRWISE = "pairwise"


@dataclass(frozen=True)
class WeightedFormula:
    formula: Formula
    weight_train: float = 1.0
    weight_test: float = 1.0
    source_line: int = 0

    def __post_init__(self) -> None:
        if not (self.weight_train > 0 and self.weight_test > 0):
            raise ShieldError(
                f"Formula weights must be positive, got {self.weight_train}/{self.weight_test}"
            )


@dataclass(frozen=True)
class KnowledgeBase:
    formulas: Tuple[WeightedFormula, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "formulas", tuple(self.formulas))
        if not self.formulas:
            raise EmptyKnowledge("Knowledge base has no formulas")

    def __len__(self) -> int:
        return len(self.formulas)

    @property
    def gamma_train(self) -> float:
        return float(sum(wf.weight_train for wf in self.formulas))

    @property
    def gamma_test(self) -> float:
        return float(sum(wf.weight_test for wf in self.formulas))

    @property
    def digest(self) -> str:
        """SHA-256 over the canonical text of every weighted formula."""
        h = hashlib.sha256()
        for wf in self.formulas:
            h.update(format_weighted(wf).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def predicates(self) -> Tuple[str, ...]:
        seen: Dict[str, None] = {}
        for wf in self.formulas:
            for name in predicates(wf.formula):
                seen.setdefault(name, None)
        return tuple(seen)


@dataclass(frozen=True)
class BoundKnowledge:
    base: KnowledgeBase
    class_names: Tuple[str, ...]
    index_of: Mapping[str, int]
    main_classes: Tuple[int, ...]
    auxiliary_classes: Tuple[int, ...] = field(default=())

    @property
    def c(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------

FORMULA_GRAMMAR = r"""
    ?start: sentence

    sentence: quantifier? body
    quantifier: "forall" NAME ":"

    ?body: formula
         | "mutual_excl" "(" excl_arg ("," excl_arg)* ")"   -> mutual_excl
    excl_arg: NAME ("(" NAME ")")?

    ?formula: disj
            | disj "=>" formula     -> implies
    ?disj: conj
         | disj "or" conj           -> or_
    ?conj: neg
         | conj "and" neg           -> and_
    ?neg: "not" neg                 -> not_
        | atom
    ?atom: NAME "(" NAME ")"        -> pred
         | "(" formula ")"

    NAME: /[A-Za-z_][A-Za-z0-9_]*/

    %import common.WS_INLINE
    %ignore WS_INLINE
"""

_PARSER = Lark(FORMULA_GRAMMAR, parser="lalr", start="start")


@dataclass(frozen=True)
class _MutualExclusion:
    classes: Tuple[str, ...]


@v_args(inline=True)
class _SentenceBuilder(Transformer):
    """Turns a parse tree into a Formula (or a mutual_excl request)."""

    def __init__(self) -> None:
        super().__init__()
        self.variables: List[Token] = []

    def pred(self, name: Token, var: Token) -> Pred:
        self.variables.append(var)
        return Pred(str(name))

    def not_(self, child: Formula) -> Not:
        return Not(child)

    def and_(self, left: Formula, right: Formula) -> And:
        return And(left, right)

    def or_(self, left: Formula, right: Formula) -> Or:
        return Or(left, right)

    def implies(self, premise: Formula, conclusion: Formula) -> Implies:
        return Implies(premise, conclusion)

    def excl_arg(self, name: Token, var: Optional[Token] = None) -> str:
        if var is not None:
            self.variables.append(var)
        return str(name)

    def mutual_excl(self, *names: str) -> _MutualExclusion:
        return _MutualExclusion(tuple(names))

    def quantifier(self, var: Token) -> Token:
        return var

    def sentence(self, *parts: object) -> Union[Formula, _MutualExclusion]:
        body = parts[-1]
        bound_var = parts[0] if len(parts) == 2 else None
        expected = str(bound_var) if bound_var is not None else None
        for var in self.variables:
            if expected is None:
                expected = str(var)
            elif str(var) != expected:
                raise FormulaSyntaxError(
                    f"Variable {var} is not the quantified variable {expected}",
                    line=var.line,
                    column=var.column,
                )
        return body  # type: ignore[return-value]


def _parse_sentence(
    text: str, line: Optional[int] = None, column_offset: int = 0
) -> Union[Formula, _MutualExclusion]:
    try:
        tree = _PARSER.parse(text)
    except UnexpectedCharacters as exc:
        raise UnknownToken(
            f"Illegal character {text[exc.pos_in_stream]!r}",
            line=line if line is not None else exc.line,
            column=exc.column + column_offset,
        ) from None
    except UnexpectedEOF:
        raise FormulaSyntaxError(
            "Unexpected end of formula",
            line=line if line is not None else 1,
            column=len(text) + 1 + column_offset,
        ) from None
    except UnexpectedToken as exc:
        found = "end of formula" if exc.token.type == "$END" else repr(str(exc.token))
        raise FormulaSyntaxError(
            f"Unexpected {found}",
            line=line if line is not None else exc.line,
            column=(exc.column if isinstance(exc.column, int) and exc.column > 0 else len(text) + 1)
            + column_offset,
        ) from None
    except UnexpectedInput as exc:  # pragma: no cover - remaining lark variants
        raise FormulaSyntaxError(str(exc), line=line) from None

    try:
        return _SentenceBuilder().transform(tree)
    except VisitError as exc:
        original = exc.orig_exc
        if not isinstance(original, FormulaSyntaxError):
            raise original from None
        if line is None:
            raise original from None
        message = str(original).split(" (line")[0]
        raise FormulaSyntaxError(
            message, line=line, column=(original.column or 0) + column_offset
        ) from None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def parse_formula(text: str) -> Formula:
    """Parse one formula; a leading ``forall x:`` is optional."""
    result = _parse_sentence(text)
    if isinstance(result, _MutualExclusion):
        raise FormulaSyntaxError("mutual_excl is a knowledge-file macro, not a formula", line=1)
    return result


_WEIGHTS_RE = re.compile(r"\s*w\s*=\s*([^,:\s]+)\s*(?:,\s*([^:\s]+)\s*)?:")
_DIRECTIVE_RE = re.compile(r"\s*@(\S+)\s*(.*?)\s*\Z")


def _parse_weight(text: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FormulaSyntaxError(f"Invalid weight {text!r}", line=line) from None
    if not value > 0 or value == float("inf"):
        raise FormulaSyntaxError(
            f"Weight must be a positive finite number, got {text}; drop the line instead",
            line=line,
        )
    return value


def parse_knowledge_file(text: str) -> KnowledgeBase:
    """
    Parse a line-oriented knowledge file.

    Each formula line may carry a ``w=<train>[,<test>] :`` prefix; a single
    value sets both weights. ``mutual_excl(...)`` lines expand with the
    encoding chosen by the last ``@mutual_excl_encoding`` directive above them
    (pairwise before any directive).
    """
    encoding = MutualExclusionEncoding.PAIRWISE
    formulas: List[WeightedFormula] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        if not content.strip():
            continue

        directive = _DIRECTIVE_RE.match(content)
        if directive:
            name, value = directive.group(1), directive.group(2).lower()
            if name != "mutual_excl_encoding":
                raise FormulaSyntaxError(f"Unknown directive @{name}", line=lineno)
            try:
                encoding = MutualExclusionEncoding(value)
            except ValueError:
                raise FormulaSyntaxError(
                    f"Unknown mutual_excl encoding {value!r}", line=lineno
                ) from None
            continue

        weight_train = weight_test = 1.0
        offset = 0
        prefix = _WEIGHTS_RE.match(content)
        if prefix:
            weight_train = _parse_weight(prefix.group(1), lineno)
            weight_test = (
                _parse_weight(prefix.group(2), lineno) if prefix.group(2) else weight_train
            )
            offset = prefix.end()
            if _WEIGHTS_RE.match(content, offset):
                raise DuplicateDirective(f"Two weight annotations on line {lineno}")

        sentence = _parse_sentence(content[offset:], line=lineno, column_offset=offset)
        if isinstance(sentence, _MutualExclusion):
            expanded = expand_mutual_exclusion(sentence.classes, encoding)
        else:
            expanded = [sentence]
        for formula in expanded:
            formulas.append(WeightedFormula(formula, weight_train, weight_test, lineno))

    if not formulas:
        raise EmptyKnowledge("Knowledge file contains no formulas")
    base = KnowledgeBase(tuple(formulas))
    log_event(
        "knowledge_parsed",
        formulas=len(base),
        gamma_train=base.gamma_train,
        gamma_test=base.gamma_test,
    )
    return base


def _chain(op: type, items: Sequence[Formula]) -> Formula:
    result = items[0]
    for item in items[1:]:
        result = op(result, item)
    return result


def expand_mutual_exclusion(
    classes: Sequence[str], encoding: MutualExclusionEncoding | str
) -> List[Formula]:
    """Expand mutual_excl(p_1..p_n) into plain formulas."""
    encoding = MutualExclusionEncoding(encoding)
    names = list(classes)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateClass(f"Repeated class in mutual_excl: {', '.join(dupes)}")
    if len(names) < 2:
        raise ArityError(f"mutual_excl needs at least 2 classes, got {len(names)}")

    preds = [Pred(n) for n in names]

    def others_false(i: int) -> Formula:
        return _chain(And, [Not(p) for j, p in enumerate(preds) if j != i])

    if encoding is MutualExclusionEncoding.TRUTH_TABLE:
        cases = [And(p, others_false(i)) for i, p in enumerate(preds)]
        return [_chain(Or, cases)]

    expanded: List[Formula] = [_chain(Or, preds)]
    expanded.extend(Implies(p, others_false(i)) for i, p in enumerate(preds))
    return expanded


def bind_predicates(
    base: KnowledgeBase,
    class_names: Sequence[str],
    main: Union[int, Sequence[str], None] = None,
) -> BoundKnowledge:
    """
    Bind every predicate to its output index (position in class_names).

    ``main`` is the number of leading main classes, an explicit list of main
    class names, or None for "all classes are main".
    """
    names = tuple(class_names)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateClass(f"Repeated class name: {', '.join(dupes)}")
    index_of = {name: i for i, name in enumerate(names)}

    missing = [p for p in base.predicates() if p not in index_of]
    if missing:
        raise UnboundPredicate(missing)

    if main is None:
        main_idx: Tuple[int, ...] = tuple(range(len(names)))
    elif isinstance(main, int):
        if not 0 <= main <= len(names):
            raise BadConfig(f"Main class count {main} outside [0, {len(names)}]")
        main_idx = tuple(range(main))
    else:
        unknown = [m for m in main if m not in index_of]
        if unknown:
            raise BadConfig(f"Unknown main class(es): {', '.join(unknown)}")
        main_idx = tuple(sorted({index_of[m] for m in main}))

    aux_idx = tuple(i for i in range(len(names)) if i not in set(main_idx))
    return BoundKnowledge(
        base=base,
        class_names=names,
        index_of=MappingProxyType(index_of),
        main_classes=main_idx,
        auxiliary_classes=aux_idx,
    )


def boolean_eval(formula: Formula, assignment: Mapping[str, bool]) -> bool:
    """Classical two-valued semantics, => as material implication."""
    if isinstance(formula, Pred):
        if formula.name not in assignment:
            raise MissingAssignment(formula.name)
        return bool(assignment[formula.name])
    if isinstance(formula, Not):
        return not boolean_eval(formula.child, assignment)
    if isinstance(formula, And):
        left = boolean_eval(formula.left, assignment)
        right = boolean_eval(formula.right, assignment)
        return left and right
    if isinstance(formula, Or):
        left = boolean_eval(formula.left, assignment)
        right = boolean_eval(formula.right, assignment)
        return left or right
    if isinstance(formula, Implies):
        premise = boolean_eval(formula.premise, assignment)
        conclusion = boolean_eval(formula.conclusion, assignment)
        return (not premise) or conclusion
    raise TypeError(f"Not a formula: {formula!r}")


def predicates(formula: Formula) -> Tuple[str, ...]:
    """Predicate names in first-appearance (left-to-right) order."""
    seen: Dict[str, None] = {}

    def visit(node: Formula) -> None:
        if isinstance(node, Pred):
            seen.setdefault(node.name, None)
        elif isinstance(node, Not):
            visit(node.child)
        elif isinstance(node, Implies):
            visit(node.premise)
            visit(node.conclusion)
        else:
            visit(node.left)
            visit(node.right)

    visit(formula)
    return tuple(seen)


def format_formula(formula: Formula, variable: str = "x", quantified: bool = False) -> str:
    """Canonical text; binary sub-formulas are parenthesised so re-parsing is exact."""

    def wrap(node: Formula) -> str:
        text = render(node)
        return f"({text})" if isinstance(node, BINARY) else text

    def render(node: Formula) -> str:
        if isinstance(node, Pred):
            return f"{node.name}({variable})"
        if isinstance(node, Not):
            return f"not {wrap(node.child)}"
        if isinstance(node, And):
            return f"{wrap(node.left)} and {wrap(node.right)}"
        if isinstance(node, Or):
            return f"{wrap(node.left)} or {wrap(node.right)}"
        return f"{wrap(node.premise)} => {wrap(node.conclusion)}"

    body = render(formula)
    return f"forall {variable}: {body}" if quantified else body


def format_weighted(wf: WeightedFormula) -> str:
    body = format_formula(wf.formula, quantified=True)
    return f"w={wf.weight_train!r},{wf.weight_test!r} : {body}"


def format_knowledge(base: KnowledgeBase) -> str:
    """Knowledge file text that parses back to the same formulas and weights."""
    return "".join(format_weighted(wf) + "\n" for wf in base.formulas)


def restrict_knowledge(base: KnowledgeBase, drop: Iterable[str]) -> KnowledgeBase:
    """Remove every formula that mentions one of the dropped predicates."""
    dropped = set(drop)
    kept = tuple(wf for wf in base.formulas if not dropped.intersection(predicates(wf.formula)))
    if not kept:
        raise EmptyKnowledge(f"No formula left after dropping {', '.join(sorted(dropped))}")
    return KnowledgeBase(kept)


def read_class_names(text: str) -> List[str]:
    """One class name per line; blank lines and '#' comments are ignored."""
    names = [line.split("#", 1)[0].strip() for line in text.splitlines()]
    names = [n for n in names if n]
    for name in names:
        if not IDENT_RE.match(name):
            raise BadConfig(f"Invalid class name {name!r}")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateClass(f"Repeated class name: {', '.join(dupes)}")
    return names
