"""
Error hierarchy for the neuralquery engine.

Every error raised by the library derives from ``NQLError`` and also from
the closest builtin exception, so callers can catch either.
"""

from typing import Iterable, Optional, Tuple


class NQLError(Exception):
    """Base class for all engine errors."""


class ShapeError(NQLError, ValueError):
    """Operand dimensions do not line up."""

    def __init__(self, message: str, left: Optional[Tuple[int, ...]] = None,
                 right: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.left = left
        self.right = right


class NQLTypeError(NQLError, TypeError):
    """Expressions of incompatible entity types were combined."""

    def __init__(self, message: str, expected: Optional[str] = None,
                 actual: Optional[str] = None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class EntityLookupError(NQLError, KeyError):
    def __init__(self, entity: str, type_name: str):
        super().__init__(f"unknown entity {entity!r} for type {type_name!r}")
        self.entity = entity
        self.type_name = type_name

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return self.args[0]


class UnknownNameError(NQLError, LookupError):
    """A type, relation, group or query variable is not declared."""

    def __init__(self, kind: str, name: str, line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown {kind} {name!r}{where}")
        self.kind = kind
        self.name = name
        self.line = line


class ValidationError(NQLError, ValueError):
    """Input data violates a documented constraint."""


class FormatError(ValidationError):
    """A line of a schema, facts or dataset file could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        location = ":".join(str(p) for p in (path, line, column) if p is not None)
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line = line
        self.column = column


class QueryParseError(NQLError):
    """Syntax error in query text."""

    def __init__(self, message: str, text: str, offset: int, line: int, column: int,
                 expected: Iterable[str] = ()):
        self.text = text
        self.offset = offset
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        detail = message
        if self.expected:
            detail += "; expected " + " or ".join(self.expected)
        super().__init__(f"line {line}, column {column}: {detail}")

    def render(self) -> str:
        """The offending source line with a caret under the error column."""
        lines = self.text.splitlines() or [""]
        source = lines[self.line - 1] if self.line - 1 < len(lines) else ""
        return f"{self}\n  {source}\n  {' ' * (self.column - 1)}^"


class BindError(NQLError):
    """A parsed query could not be bound against the knowledge base."""

    def __init__(self, message: str, span: Optional[Tuple[int, int]] = None,
                 text: Optional[str] = None):
        super().__init__(message)
        self.span = span
        self.text = text

    def render(self) -> str:
        if self.span is None or self.text is None:
            return str(self)
        start, end = self.span
        line_start = self.text.rfind("\n", 0, start) + 1
        line_end = self.text.find("\n", start)
        if line_end < 0:
            line_end = len(self.text)
        width = max(1, min(end, line_end) - start)
        return (f"{self}\n  {self.text[line_start:line_end]}\n"
                f"  {' ' * (start - line_start)}{'^' * width}")


class UsageError(NQLError, RuntimeError):
    """The API was called in the wrong order or with the wrong arguments."""


class CheckpointError(NQLError):
    """A checkpoint file is unreadable, from another version, or mismatched."""


class DivergenceError(NQLError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


class HaltingError(NQLError, ArithmeticError):
    """Halting coefficients of the recurrent model left the unit interval."""
