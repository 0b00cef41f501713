from functools import lru_cache
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Runtime
    threads: int = 1
    log_level: str = "INFO"

    # Monte Carlo
    inner_chunk: int = 8192  # inner-loop samples per batch
    inner_cache_mb: int = 256  # ceiling for cached inner-loop observables

    # Artifacts
    output_dir: str = "runs"

    @property
    def inner_cache_bytes(self) -> int:
        return self.inner_cache_mb * 1024 * 1024

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        env_prefix = "DIPOED_"
        extra = "ignore"


@lru_cache()
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
