"""
PrefSynth - Core Configuration
"""
from functools import lru_cache
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables.

    Run-level parameters (corpus, dims, reflection, ...) live in
    ``prefsynth.schemas.RunConfig``; this object only holds what belongs to
    the host: where outputs go, how logs look, and how to reach an optional
    keyword endpoint.
    """

    model_config = SettingsConfigDict(
        env_prefix="PREFSYNTH_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "PrefSynth"
    app_version: str = "0.1.0"

    # Output root for run directories (out/<experiment>/<seed>/...)
    output_root: str = Field(default="./out")

    # Worker slots for seeds/arms
    jobs: int = Field(default=1, ge=1)

    # External keyword endpoint (only used in external keyword mode)
    keyword_endpoint_url: Optional[str] = Field(default=None)
    keyword_timeout_seconds: float = 30.0
    keyword_retry_attempts: int = 3
    keyword_retry_backoff_seconds: float = 0.5
    keyword_max_inflight: int = 4

    # Logging
    log_level: str = "INFO"
    log_format: Literal["json", "console"] = "json"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
