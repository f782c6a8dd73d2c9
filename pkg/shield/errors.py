"""
Exception hierarchy.

Every error raised on bad input derives from ShieldError, itself a ValueError,
so callers that only care about "invalid input" can keep catching ValueError.
"""

from __future__ import annotations

from typing import Iterable, Optional


class ShieldError(ValueError):
    """Root of all tnorm-shield input errors."""


class FormulaSyntaxError(ShieldError):
    """Malformed formula or knowledge-file line."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{where}")


class UnknownToken(FormulaSyntaxError):
    """Illegal character in a formula."""


class DuplicateDirective(ShieldError):
    """Two weight annotations attached to one formula."""


class EmptyKnowledge(ShieldError):
    """A knowledge base must hold at least one formula."""


class DuplicateClass(ShieldError):
    """A class name repeated where distinct names are required."""


class ArityError(ShieldError):
    """Too few arguments for a knowledge macro."""


class UnboundPredicate(ShieldError):
    """Predicates with no classifier output to bind to."""

    def __init__(self, names: Iterable[str]):
        self.names = tuple(names)
        super().__init__(f"Unbound predicate(s): {', '.join(self.names)}")


class MissingAssignment(ShieldError):
    """A predicate has no truth value in a Boolean assignment."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"No truth value assigned to predicate {name}")


class DimensionMismatch(ShieldError):
    """Vector or matrix of the wrong shape."""


class OutputRangeError(ShieldError):
    """Classifier outputs outside [0, 1] beyond rounding tolerance."""


class EmptyBatch(ShieldError):
    """Operation needs at least one sample."""


class EmptySet(ShieldError):
    """Dataset or sample set is empty."""


class BadArchitecture(ShieldError):
    """Invalid layer sizes or activation."""


class TraceMismatch(ShieldError):
    """A forward trace was not produced by the given model."""


class ModelFormatError(ShieldError):
    """Unreadable or incompatible model file."""


class BadPercent(ShieldError):
    """Percentage outside [0, 100]."""


class NoMainClasses(ShieldError):
    """Single-label view requested without main classes."""


class InvalidPartition(ShieldError):
    """Positive/negative class sets are empty, overlapping or out of range."""


class BadConfig(ShieldError):
    """Invalid experiment configuration."""


class NotSingleLabel(ShieldError):
    """A sample does not have exactly one positive main class."""


class Misaligned(ShieldError):
    """Clean and adversarial datasets are not row-aligned."""
