from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator
from functools import lru_cache


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = ""  # 空ならコンソールのみ

    # Output
    BICON_OUTPUT_DIR: str = "runs"

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level name"""
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(
                "Invalid LOG_LEVEL. Must be one of: DEBUG, INFO, WARNING, ERROR, CRITICAL"
            )
        return level


@lru_cache()
def get_settings() -> Settings:
    """Get singleton instance of settings"""
    return Settings()


settings = get_settings()
