"""Exception hierarchy shared across the package."""

from __future__ import annotations

from .crypto import SigningFailure


class AegisError(Exception):
    """Base class for every error raised by this package."""


class MalformedDocument(AegisError):
    pass


class BaseHashMismatch(AegisError):
    """Amendment was built against a policy that is no longer sealed."""


class ImmutableFieldEdit(AegisError):
    """Amendment touches a field that is frozen after genesis."""


class QuorumInsufficient(AegisError):
    pass


class LineageMismatch(AegisError):
    pass


class MalformedAction(AegisError):
    pass


class UnknownBackend(AegisError):
    pass


class SegmentSealed(AegisError):
    pass


class MalformedLog(AegisError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class RangeEmpty(AegisError):
    pass


class RedeclarationInvalid(AegisError):
    pass


class StalePool(AegisError):
    """Validator is not part of the current epoch's active pool."""


class DuplicateVote(AegisError):
    pass


class RosterTooSmall(AegisError):
    pass


class TrialSetupFailure(AegisError):
    pass


class MismatchedTaskSets(AegisError):
    pass


class BootHalt(AegisError):
    """Genesis verification failed; nothing may execute."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"genesis verification halted: {reason}")


__all__ = [
    "AegisError",
    "BaseHashMismatch",
    "BootHalt",
    "DuplicateVote",
    "ImmutableFieldEdit",
    "LineageMismatch",
    "MalformedAction",
    "MalformedDocument",
    "MalformedLog",
    "MismatchedTaskSets",
    "QuorumInsufficient",
    "RangeEmpty",
    "RedeclarationInvalid",
    "RosterTooSmall",
    "SegmentSealed",
    "SigningFailure",
    "StalePool",
    "TrialSetupFailure",
    "UnknownBackend",
]
