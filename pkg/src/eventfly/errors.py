"""Exception types shared across the package."""

from __future__ import annotations


class EventFlyError(Exception):
    """Base class for every error raised by eventfly."""


class FormatError(EventFlyError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ShapeError(EventFlyError, ValueError):
    pass


class DomainError(EventFlyError, ValueError):
    """Input values fall outside the mathematical domain of an operation."""


class ConfigError(EventFlyError, ValueError):
    pass


class InvalidWindowError(ConfigError):
    pass


class EmptyInputError(EventFlyError, ValueError):
    pass


class StateError(EventFlyError, RuntimeError):
    pass


class TrainingAbort(EventFlyError, RuntimeError):
    """Raised when a loss term turns non-finite; ``term`` names the culprit."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite loss term {term!r}{': ' + detail if detail else ''}")


class EventFlyWarning(UserWarning):
    """Degenerate-but-legal input, e.g. an empty entropy region."""
