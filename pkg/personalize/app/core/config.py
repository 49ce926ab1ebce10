from functools import lru_cache
from pathlib import Path

from pydantic import model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # App
    APP_ENV: str = "development"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"  # text | json

    # Artifact cache (overridden by the PERSONALIZE_CACHE_DIR env var)
    PERSONALIZE_CACHE_DIR: str = "~/.cache/personalize"

    # Sentry (Error Monitoring)
    SENTRY_DSN: str = ""
    SENTRY_TRACES_SAMPLE_RATE: float = 0.0

    # ─── Toy backbone ───
    IMAGE_CHANNELS: int = 3
    NUM_TIMESTEPS: int = 1000
    NOISE_SCHEDULE: str = "linear"  # linear | cosine
    EMBEDDING_DIM: int = 32
    CONTEXT_LENGTH: int = 24
    HIDDEN_CHANNELS: int = 32
    LAYER_COUNT: int = 4
    TEXT_LAYERS: int = 2

    # ─── Training ───
    LEARNING_RATE: float = 1e-5
    BATCH_SIZE: int = 8
    WEIGHT_DECAY: float = 1e-2
    CHECKPOINT_INTERVAL: int = 100
    MASK_THRESHOLD: float = 0.5

    # ─── Losses ───
    W_S: float = 1.0
    W_B: float = 1.0
    W_I: float = 1.0
    W_C_MAX: float = 0.1
    CONTRASTIVE_TAU: float = 0.07
    SIGMOID_K: float = 10.0
    EXPONENTIAL_K: float = 5.0

    # ─── Evaluation ───
    IMAGES_PER_PROMPT: int = 5
    SAMPLER_STEPS: int = 25
    GUIDANCE_SCALE: float = 1.0
    STUB_EMBEDDING_DIM: int = 64
    TRAIN_SPLIT_TEMPLATES: int = 3

    @model_validator(mode="after")
    def _validate_settings(self) -> "Settings":
        if self.NUM_TIMESTEPS < 1:
            raise ValueError("NUM_TIMESTEPS must be >= 1.")
        if not 1 <= self.SAMPLER_STEPS <= self.NUM_TIMESTEPS:
            raise ValueError("SAMPLER_STEPS must lie in [1, NUM_TIMESTEPS].")
        if self.LAYER_COUNT < 1:
            raise ValueError("LAYER_COUNT must be >= 1.")
        if self.W_C_MAX < 0:
            raise ValueError("W_C_MAX must be non-negative.")
        if self.CONTRASTIVE_TAU <= 0:
            raise ValueError("CONTRASTIVE_TAU must be positive.")
        if not 0.0 < self.MASK_THRESHOLD < 1.0:
            raise ValueError("MASK_THRESHOLD must lie in (0, 1).")
        return self

    @property
    def cache_dir(self) -> Path:
        return Path(self.PERSONALIZE_CACHE_DIR).expanduser()


@lru_cache
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
