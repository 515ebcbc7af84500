"""Shared error base for every koos module.

Each module defines its own error classes next to the code that raises them;
they all derive from :class:`KoosError` so the CLI can map any of them to a
stable ``code`` and exit status without knowing the module.
"""

from __future__ import annotations


class KoosError(Exception):
    code = "koos_error"
    exit_status = 2

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(message)


class InvariantViolation(KoosError):
    """A computed result broke a property the code guarantees."""

    code = "invariant_violation"
    exit_status = 3
