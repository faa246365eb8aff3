"""
Runtime settings read from the environment.

Nothing here is required; every field has a default. Experiment parameters
never come from the environment, only process-level knobs do.
"""

from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings (prefix ``STOCHMATCH_``)."""

    model_config = SettingsConfigDict(env_prefix="STOCHMATCH_", extra="ignore")

    log_level: str = Field("INFO", description="Logging level for the CLI")
    workers: int = Field(1, ge=1, le=256, description="Worker threads for ensemble work")


# Global settings instance
settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the settings instance."""
    global settings
    if settings is None:
        settings = Settings()
    return settings
