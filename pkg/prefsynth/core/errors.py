"""
PrefSynth - Error Types
"""
from typing import Any, Optional


class PrefSynthError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1

    def details(self) -> dict[str, Any]:
        return {}

    def to_record(self) -> dict[str, Any]:
        """Machine-parseable error record emitted by the CLI."""
        return {
            "error": type(self).__name__,
            "message": str(self),
            "details": self.details(),
        }


class DomainError(PrefSynthError, ValueError):
    """A numerical or model precondition was violated."""


class ConfigError(PrefSynthError, ValueError):
    """Invalid configuration value or combination.

    ``fields`` maps dotted field paths to their validation messages.
    """

    exit_code = 2

    def __init__(self, message: str, fields: Optional[dict[str, str]] = None) -> None:
        self.fields = dict(fields or {})
        super().__init__(message)

    def details(self) -> dict[str, Any]:
        return {"fields": self.fields} if self.fields else {}


class CorpusParseError(PrefSynthError, ValueError):
    """Malformed record in a corpus file."""

    def __init__(self, message: str, line: int, field: Optional[str] = None) -> None:
        self.line = line
        self.field = field
        where = f"line {line}" + (f", field '{field}'" if field else "")
        super().__init__(f"{where}: {message}")

    def details(self) -> dict[str, Any]:
        return {"line": self.line, "field": self.field}


class CheckpointError(PrefSynthError, ValueError):
    """Checkpoint file is unreadable or inconsistent with the expected kind."""


class KeywordServiceError(PrefSynthError, RuntimeError):
    """External keyword endpoint unreachable or timing out."""

    def __init__(self, message: str, attempts: int) -> None:
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")

    def details(self) -> dict[str, Any]:
        return {"attempts": self.attempts}


class KeywordParseError(PrefSynthError, ValueError):
    """External keyword endpoint returned a malformed body."""


class MissingArtifactError(PrefSynthError, FileNotFoundError):
    """An upstream artifact is missing; names the command that produces it."""

    exit_code = 3

    def __init__(self, artifact: str, producer: str) -> None:
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"missing {artifact}: run {producer} first")

    def details(self) -> dict[str, Any]:
        return {"artifact": self.artifact, "producer": self.producer}


class ReflectionStepError(PrefSynthError, RuntimeError):
    """A component failed inside the reflection loop."""

    def __init__(self, step: int, cause: BaseException) -> None:
        self.step = step
        super().__init__(f"reflection step {step} failed: {cause}")

    def details(self) -> dict[str, Any]:
        return {"step": self.step}
