"""
Process configuration using Pydantic Settings.

Loads BILORA_* environment variables (and an optional .env file) and provides
typed settings for the CLI. Experiment configuration lives in schemas.py.
"""

from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

from bilora.exceptions import ArtifactError


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    # App Info
    app_name: str = "bilora"
    app_version: str = "0.1.0"

    # Output
    out: str = "./runs"  # BILORA_OUT

    # Worker pool
    jobs: int = 1

    # Logging
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="BILORA_",
        case_sensitive=False,
        extra="ignore",
    )

    def resolve_output_dir(
        self, flag: str | None = None, configured: str | None = None
    ) -> Path:
        """
        Pick the output directory.

        Precedence: --out flag, BILORA_OUT, config output_dir, default.
        """
        if flag:
            return Path(flag)
        if "out" in self.model_fields_set:
            return Path(self.out)
        if configured:
            return Path(configured)
        return Path(self.out)


def ensure_output_directory(path: Path) -> Path:
    """Create the output directory if it doesn't exist."""
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactError(f"Can't create output directory {path}: {e}") from e
    return path


@lru_cache
def get_settings() -> Settings:
    """
    Get cached settings instance.

    The environment and .env are read once per process; tests clear the cache.
    """
    return Settings()
