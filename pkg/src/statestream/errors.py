"""Exception hierarchy.

``DomainError`` subclasses map to CLI exit code 1, ``ConfigError`` and
``OSError`` to exit code 2.
"""

from __future__ import annotations


class DomainError(Exception):
    """A well-formed request that violates a domain rule."""


class ConfigError(Exception):
    """Invalid configuration value or unknown configuration key."""


# dialogue
class MalformedMarker(DomainError, ValueError):
    pass


class NonRepresentable(DomainError, ValueError):
    pass


class InvalidInterval(DomainError, ValueError):
    pass


class InvalidDialogue(DomainError, ValueError):
    pass


class OverlappingEvents(DomainError, ValueError):
    pass


class EventOutOfRange(DomainError, ValueError):
    pass


class QuestionAfterEvent(DomainError, ValueError):
    pass


class SchemaViolation(DomainError, ValueError):
    """Malformed serialized record. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# loss
class LossDomainError(DomainError, ValueError):
    pass


class AllZeroCounts(DomainError, ValueError):
    pass


class ShapeMismatch(DomainError, ValueError):
    pass


# synthesis / model
class InfeasibleRatio(DomainError, ValueError):
    pass


class IdOutOfRange(DomainError, ValueError):
    pass


class DivergenceDetected(DomainError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class EmptyEvaluationSet(DomainError, ValueError):
    pass


# streaming engine
class VocabularyMismatch(DomainError, ValueError):
    pass


class SessionClosed(DomainError, RuntimeError):
    pass


class ContextOverflow(DomainError, RuntimeError):
    pass


# benchmark metrics
class DegenerateInterval(DomainError, ValueError):
    pass


class EmptySet(DomainError, ValueError):
    pass


class EmptyGold(DomainError, ValueError):
    pass


# judge
class JudgeUnavailable(DomainError, RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class JudgeProtocolError(DomainError, ValueError):
    pass


class MissingRuns(DomainError, FileNotFoundError):
    pass
