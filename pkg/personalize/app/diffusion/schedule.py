"""DDPM noise schedules and the closed-form forward process."""
import math
from dataclasses import dataclass

import torch

from app.core.errors import ShapeError, SpecError, StepIndexError

SCHEDULE_KINDS = ("linear", "cosine")

# Reference linear endpoints for a 1000-step schedule; rescaled for other T.
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
MAX_BETA = 0.999
COSINE_OFFSET = 8e-3


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: torch.Tensor      # (T,) float64
    alpha_bar: torch.Tensor  # (T,) cumulative product of (1 - beta)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def check_step(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise StepIndexError(f"timestep {t} outside [0, {self.T})")


def make_noise_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise SpecError(f"schedule needs T >= 1, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = torch.linspace(scale * LINEAR_BETA_START, scale * LINEAR_BETA_END, T, dtype=torch.float64)
        betas = betas.clamp(max=MAX_BETA)
    elif kind == "cosine":
        def f(step: int) -> float:
            return math.cos((step / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

        betas = torch.tensor([min(1 - f(s + 1) / f(s), MAX_BETA) for s in range(T)], dtype=torch.float64)
    else:
        raise SpecError(f"unknown noise schedule {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(kind=kind, betas=betas, alpha_bar=alpha_bar)


def _coefficients(schedule: NoiseSchedule, t: int | torch.Tensor, ndim: int) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
            raise StepIndexError(f"timesteps outside [0, {schedule.T})")
        ab = schedule.alpha_bar[t].reshape(-1, *([1] * (ndim - 1)))
    else:
        step = int(t)
        schedule.check_step(step)
        ab = schedule.alpha_bar[step]
    return ab.sqrt(), (1.0 - ab).sqrt()


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is a single step or a (B,) tensor of steps for batched (B, C, H, W) inputs.
    """
    if z0.shape != eps.shape:
        raise ShapeError(f"latent shape {tuple(z0.shape)} does not match noise shape {tuple(eps.shape)}")
    signal, noise = _coefficients(schedule, t, z0.ndim)
    return signal * z0 + noise * eps
