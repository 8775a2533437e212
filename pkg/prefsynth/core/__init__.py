"""Core module exports."""
from prefsynth.core.config import Settings, get_settings
from prefsynth.core.errors import (
    CheckpointError,
    ConfigError,
    CorpusParseError,
    DomainError,
    KeywordParseError,
    KeywordServiceError,
    MissingArtifactError,
    PrefSynthError,
    ReflectionStepError,
)
from prefsynth.core.logging import get_logger, log_context, setup_logging

__all__ = [
    "Settings",
    "get_settings",
    "get_logger",
    "setup_logging",
    "log_context",
    "PrefSynthError",
    "DomainError",
    "ConfigError",
    "CorpusParseError",
    "CheckpointError",
    "KeywordServiceError",
    "KeywordParseError",
    "MissingArtifactError",
    "ReflectionStepError",
]
