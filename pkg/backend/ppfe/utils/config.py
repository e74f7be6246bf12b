from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache


class Settings(BaseSettings):
    """Process-level settings, overridable through PPFE_* environment variables"""

    # Reproducibility
    seed: int = 0

    # Execution
    threads: int = 1
    output_dir: str = "results"

    # Numerics
    svd_max_sweeps: int = 60
    svd_tolerance: float = 1e-12
    reweight_eps_clamp: float = 1e-6
    ce_loss_clip: float = 20.0

    # Logging
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="PPFE_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",  # Ignore unrelated PPFE_* variables instead of raising errors
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
