"""Configuration settings for the SASEGAN enhancer."""

import zlib
from typing import Any, List, Optional

import numpy as np
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings loaded from environment variables or a key=value file."""

    # Audio
    SAMPLE_RATE: int = 16000
    WINDOW: int = 16384  # samples per segment
    TRAIN_OVERLAP: float = 0.5
    PREEMPHASIS: float = 0.95

    # Model
    FILTER_SCHEDULE: str = "16,32,32,64,64,128,128,256,256,512,1024"
    FILTER_WIDTH: int = 31
    STRIDE: int = 2
    ATTENTION_LAYERS: str = "11"  # comma list, "all" or "none"
    ATTENTION_K: int = 8
    ATTENTION_P: int = 4
    SCALE_DIVISOR: int = 1  # desk-scale shrinking
    SPECTRAL_NORM: bool = True

    # Training
    EPOCHS: int = 100
    BATCH_SIZE: int = 50
    LEARNING_RATE: float = 2e-4
    RMSPROP_DECAY: float = 0.9
    RMSPROP_EPS: float = 1e-8
    LAMBDA_L1: float = 100.0
    SEED: int = 0
    CHECKPOINT_EVERY: int = 100  # steps
    KEEP_CHECKPOINTS: int = 5
    LOG_EVERY: int = 10  # steps

    # Metrics
    SSNR_FRAME_MS: int = 30
    SSNR_OVERLAP: float = 0.75
    SSNR_MIN_DB: float = -10.0
    SSNR_MAX_DB: float = 35.0
    SILENCE_ENERGY: float = 1e-8
    EVAL_WORKERS: int = 1

    # Service
    OUT_DIR: str = "runs"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "console"  # console or json

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"

    def filter_schedule(self) -> List[int]:
        return [int(v) for v in self.FILTER_SCHEDULE.split(",") if v.strip()]


settings = Settings()


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """
    Independent random stream derived from the run seed.

    Args:
        seed: Run seed (--seed)
        name: Stream name ("data", "init", "latent", "shuffle", "noise", ...)

    Returns:
        Generator that depends only on (seed, name)
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def load_settings(env_file: Optional[str] = None, **overrides: Any) -> Settings:
    """
    Re-read settings into the shared `settings` object.

    Precedence: overrides > environment > env_file > defaults.
    """
    fresh = Settings(_env_file=env_file) if env_file else Settings()
    for name in Settings.model_fields:
        setattr(settings, name, getattr(fresh, name))
    for name, value in overrides.items():
        if value is not None:
            setattr(settings, name, value)
    return settings
