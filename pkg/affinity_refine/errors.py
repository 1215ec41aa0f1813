"""Exception hierarchy shared by the library and the CLI.

Every error carries the CLI exit code it maps to: 1 for bad input, 3 for an
internal contract violation. File-system failures are left as ``OSError``
and map to exit code 2 in the CLI.
"""

from __future__ import annotations

from typing import Any


class AffinityRefineError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


class ArgumentError(AffinityRefineError, ValueError):
    """An argument or configuration value is out of its allowed domain."""


class ValidationError(AffinityRefineError, ValueError):
    """Data failed validation; ``offenders`` lists the offending coordinates."""

    def __init__(self, message: str, offenders: list[tuple[int, ...]] | None = None):
        super().__init__(message)
        self.offenders: list[tuple[int, ...]] = offenders or []


class FormatError(AffinityRefineError, ValueError):
    """A DTEN / PGM / manifest file does not match its format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LrUndefinedError(AffinityRefineError, ValueError):
    """The label reassign loss needs at least two classes with centroids."""


class GenerationError(AffinityRefineError):
    """A synthetic scene could not be generated within the retry budget."""


class ContractViolation(AffinityRefineError):
    """An internal numerical contract failed (oracle mismatch, gradient check)."""

    exit_code = 3

    def __init__(self, message: str, payload: dict[str, Any] | None = None):
        super().__init__(message)
        self.payload = payload
