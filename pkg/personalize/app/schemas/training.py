"""Training configuration: loss weights, contrastive schedule and the run config."""
import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings
from app.embedders.tokens import InitRule, Method

ScheduleKind = Literal["zero", "one", "linear", "exponential", "sigmoid", "cosine"]
SCHEDULE_KINDS: tuple[str, ...] = ("zero", "one", "linear", "exponential", "sigmoid", "cosine")

DEFAULT_POOL_MIX = (0.25, 0.25, 0.5)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    w_s: float = Field(default=settings.W_S, ge=0)
    w_b: float = Field(default=settings.W_B, ge=0)
    w_i: float = Field(default=settings.W_I, ge=0)
    w_c_max: float = Field(default=settings.W_C_MAX, ge=0)
    tau: float = Field(default=settings.CONTRASTIVE_TAU, gt=0)

    @model_validator(mode="after")
    def _finite(self) -> "LossWeights":
        if not all(math.isfinite(v) for v in (self.w_s, self.w_b, self.w_i, self.w_c_max, self.tau)):
            raise ValueError("loss weights must be finite")
        return self


class WeightSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ScheduleKind = "cosine"
    total_steps: int = Field(default=1, ge=1)
    k: float | None = Field(default=None, gt=0)  # shape for sigmoid / exponential

    @property
    def shape(self) -> float:
        if self.k is not None:
            return self.k
        return settings.SIGMOID_K if self.kind == "sigmoid" else settings.EXPONENTIAL_K


class TrainingConfig(BaseModel):
    """One personalization run."""

    model_config = ConfigDict(extra="forbid")

    method: Method = Method.TI
    learning_rate: float = Field(default=settings.LEARNING_RATE, ge=0)
    batch_size: int = Field(default=settings.BATCH_SIZE, ge=1)
    total_steps: int = Field(default=500, ge=1)
    weights: LossWeights = Field(default_factory=LossWeights)
    schedule: WeightSchedule | None = None
    pool_mix: tuple[float, float, float] = DEFAULT_POOL_MIX
    seed: int = 0
    use_masks: bool = True
    init: InitRule = "supercategory_word"
    weight_decay: float = Field(default=settings.WEIGHT_DECAY, ge=0)
    checkpoint_interval: int = Field(default=settings.CHECKPOINT_INTERVAL, ge=1)
    mask_threshold: float = Field(default=settings.MASK_THRESHOLD, gt=0, lt=1)
    neti_hidden_dim: int = Field(default=64, ge=1)

    @field_validator("pool_mix")
    @classmethod
    def _check_mix(cls, mix: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(p < 0 or not math.isfinite(p) for p in mix):
            raise ValueError("pool_mix entries must be finite and >= 0")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"pool_mix must sum to 1, got {sum(mix)}")
        return mix

    @model_validator(mode="after")
    def _fill_schedule(self) -> "TrainingConfig":
        if self.schedule is None:
            self.schedule = WeightSchedule(total_steps=self.total_steps)
        elif self.schedule.total_steps != self.total_steps:
            raise ValueError(
                f"schedule.total_steps ({self.schedule.total_steps}) must equal total_steps ({self.total_steps})"
            )
        return self

    @property
    def contrastive_schedule(self) -> WeightSchedule:
        assert self.schedule is not None
        return self.schedule

    @classmethod
    def for_method(cls, method_tag: str, **overrides: object) -> "TrainingConfig":
        """Build a config from a CLI method tag: ti, neti, ti+ or neti+.

        The plain tags reduce the "+" pipeline to single-token training:
        subject-pool prompts only, no background loss, no contrastive term
        and no masking.
        """
        plus = method_tag.endswith("+")
        method = Method(method_tag.rstrip("+"))
        if plus:
            return cls(method=method, **overrides)  # type: ignore[arg-type]
        weights = overrides.pop("weights", None) or LossWeights()
        assert isinstance(weights, LossWeights)
        overrides.update(
            pool_mix=(1.0, 0.0, 0.0),
            weights=weights.model_copy(update={"w_b": 0.0, "w_c_max": 0.0}),
            use_masks=False,
        )
        return cls(method=method, **overrides)  # type: ignore[arg-type]
