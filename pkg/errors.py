"""
errors.py: Exception hierarchy shared by every module

Each exception carries the CLI exit code it maps to:
    0 = success, 1 = failure / failed assertion suite, 2 = usage or config error.

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

from typing import Optional


class BiflError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


class ConfigError(BiflError, ValueError):
    """Invalid run configuration or strategy/parameter mismatch."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(BiflError, ValueError):
    """Tensor dimensions do not match."""


class InvalidValueError(BiflError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class InvalidStateError(BiflError, RuntimeError):
    """Operation called on an object in the wrong state (e.g. stale cache)."""


class DomainError(BiflError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class RangeError(DomainError):
    """Argument outside its admissible numeric range."""


class SolverFailureError(BiflError, RuntimeError):
    """A numeric solver could not bracket or converge."""


class FitFailureError(BiflError, RuntimeError):
    """Least-squares curve fit did not converge."""


class CountFeasibilityError(BiflError, RuntimeError):
    """The local client's vote is inconsistent with the received tally."""


class RefusalError(BiflError, ValueError):
    """Request refused because it exceeds a hard limit (no silent heuristic)."""


class CheckpointError(BiflError, ValueError):
    """Malformed or incompatible checkpoint file."""


class IdxParseError(BiflError, ValueError):
    """Malformed IDX file; `offset` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int, path: str = ""):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}at byte offset {offset}: {message}")
