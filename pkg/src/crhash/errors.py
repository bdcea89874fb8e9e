"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class CRHError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CRHError, ValueError):
    """Invalid parameters or configuration."""

    exit_code = 2


class DataFormatError(CRHError, ValueError):
    """Malformed or inconsistent input data.

    ``offset`` is the byte position in the file when the error came from a reader.
    """

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyClassError(DataFormatError):
    """A class has no samples carrying it."""

    def __init__(self, cls: int, context: str = ""):
        msg = f"class {cls} has no samples"
        if context:
            msg = f"{msg} {context}"
        super().__init__(msg)
        self.cls = cls


class InfeasibleAssignmentError(CRHError):
    """Fewer distinct candidate codes than classes for some head."""

    exit_code = 4

    def __init__(self, message: str, head: int | None = None, available: int | None = None,
                 needed: int | None = None):
        super().__init__(message)
        self.head = head
        self.available = available
        self.needed = needed
