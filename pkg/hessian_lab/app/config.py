import os
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Process-wide settings, overridable through HESSIAN_LAB_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="HESSIAN_LAB_", env_file=".env", extra="ignore")

    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1, description="Worker processes for batch kinds")
    log_level: str = Field("INFO", description="Logging level name")
    output_dir: Path = Field(Path("./runs"), description="Default directory for artifacts")
    max_dimension: int = Field(4, ge=1, le=8, description="Largest complex dimension n accepted by specs")
    cone_eps_solver: float = Field(1e-10, ge=0.0, description="Admissibility margin used inside Newton iterations")


@lru_cache
def get_settings() -> Settings:
    return Settings()
