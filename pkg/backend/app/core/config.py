"""
Core configuration module for the MTL-TSMOM backtester.

This module handles process-level settings and environment variables.
Run definitions (data, strategies, protocol) live in the run-config file,
see app.schemas.RunConfig.
"""

import os
from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    PROJECT_NAME: str = "MTL-TSMOM"
    VERSION: str = "1.0.0"

    # Default root for run directories when the config gives a relative path
    OUTPUT_ROOT: str = os.getenv("MTL_TSMOM_OUTPUT_ROOT", "./runs")

    # Training runs are CPU float64; parallelism comes from backtest.workers
    TORCH_NUM_THREADS: int = 1

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: Optional[str] = None


# Global settings instance
settings = Settings()
