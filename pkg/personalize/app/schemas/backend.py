"""Construction parameters for the toy diffusion backbone."""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import settings

ScheduleKind = Literal["linear", "cosine"]


class BackboneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: int = Field(default=settings.IMAGE_CHANNELS, ge=1)
    image_size: int = Field(default=16, ge=8)
    embedding_dim: int = Field(default=settings.EMBEDDING_DIM, ge=2)
    context_length: int = Field(default=settings.CONTEXT_LENGTH, ge=3)
    hidden_channels: int = Field(default=settings.HIDDEN_CHANNELS, ge=4)
    layer_count: int = Field(default=settings.LAYER_COUNT, ge=1)
    num_timesteps: int = Field(default=settings.NUM_TIMESTEPS, ge=1)
    schedule_kind: ScheduleKind = settings.NOISE_SCHEDULE  # type: ignore[assignment]
    text_layers: int = Field(default=settings.TEXT_LAYERS, ge=0)
    text_heads: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check_heads(self) -> "BackboneSpec":
        if self.embedding_dim % self.text_heads:
            raise ValueError("embedding_dim must be divisible by text_heads")
        if self.hidden_channels % 4:
            raise ValueError("hidden_channels must be a multiple of 4 (group norm)")
        return self
