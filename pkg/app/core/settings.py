# app/core/settings.py
from __future__ import annotations

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # ============== App ==============
    APP_NAME: str = "macpower"

    # ============== Parallelism ==============
    # Worker count for payoff tables, N sweeps and Monte Carlo blocks.
    # Results never depend on it: every random stream is derived per task.
    MACPOWER_THREADS: int = Field(1)

    # ============== Logging ==============
    # Level name for the CLI; --verbose overrides it with DEBUG.
    MACPOWER_LOG_LEVEL: str = "INFO"

    @field_validator("MACPOWER_THREADS", mode="before")
    @classmethod
    def _parse_threads(cls, v):
        """
        Accept ints or numeric strings; anything below 1 runs single-threaded.
        Empty strings are already dropped by env_ignore_empty.
        """
        if isinstance(v, str):
            s = v.strip()
            if not s.lstrip("-").isdigit():
                raise ValueError(f"MACPOWER_THREADS must be an integer, got {v!r}")
            v = int(s)
        if isinstance(v, int) and v < 1:
            return 1
        return v

    # ============== Pydantic v2 ==============
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_ignore_empty=True,
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
