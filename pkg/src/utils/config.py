import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseModel):
    """Runtime settings read from the environment (and a local .env file).

    These only tune logging, where outputs go and how much parallelism is
    used; they never change what is computed.
    """

    log_level: str = "INFO"
    log_file: Optional[str] = None
    output_dir: str = "outputs"
    n_jobs: int = Field(default=1, ge=-1)

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {LOG_LEVELS}, got {value!r}")
        return value

    @field_validator("n_jobs")
    @classmethod
    def _nonzero_jobs(cls, value: int) -> int:
        if value == 0:
            raise ValueError("CFEVAL_N_JOBS must be -1 or a positive integer")
        return value


_settings: Optional[Settings] = None


def get_settings(reload: bool = False) -> Settings:
    """Load settings once per process; pass reload=True to re-read the environment."""
    global _settings
    if _settings is None or reload:
        load_dotenv()
        _settings = Settings(
            log_level=os.getenv("LOG_LEVEL", "INFO"),
            log_file=os.getenv("LOG_FILE") or None,
            output_dir=os.getenv("CFEVAL_OUTPUT_DIR", "outputs"),
            n_jobs=int(os.getenv("CFEVAL_N_JOBS", "1")),
        )
    return _settings
