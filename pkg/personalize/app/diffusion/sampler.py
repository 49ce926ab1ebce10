"""Deterministic DDIM (eta = 0) sampling with optional classifier-free guidance."""
import logging
from collections.abc import Callable, Sequence

import torch

from app.core.determinism import torch_generator
from app.core.errors import SpecError
from app.diffusion.predictor import EpsilonPredictor, predict_eps
from app.diffusion.schedule import NoiseSchedule
from app.embedders.conditioning import ConditioningBundle

logger = logging.getLogger(__name__)

ConditioningProvider = Callable[[int], ConditioningBundle]


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided steps, highest first: ``steps=1`` visits t=0 only."""
    if not 1 <= steps <= T:
        raise SpecError(f"sampler steps must lie in [1, {T}], got {steps}")
    stride = T // steps
    return [i * stride for i in range(steps)][::-1]


def sample(
    model: EpsilonPredictor,
    conditioning: ConditioningBundle | ConditioningProvider,
    schedule: NoiseSchedule,
    seed: int,
    steps: int,
    *,
    shape: Sequence[int],
    guidance_scale: float = 1.0,
    unconditional: ConditioningBundle | None = None,
) -> torch.Tensor:
    """Run the reverse process from z_T ~ N(0, I) drawn with ``seed``.

    ``conditioning`` may be a fixed bundle or a callable t -> bundle for
    timestep-dependent (NeTI) embeddings. Guidance mixes in the prediction for
    ``unconditional`` when ``guidance_scale != 1``.
    """
    timesteps = ddim_timesteps(schedule.T, steps)
    if guidance_scale != 1.0 and unconditional is None:
        raise SpecError("classifier-free guidance needs an unconditional bundle")
    provider: ConditioningProvider = conditioning if callable(conditioning) else (lambda _t: conditioning)

    gen = torch_generator(seed)
    z = torch.randn(tuple(shape), generator=gen, dtype=torch.float64)
    alpha_bar = schedule.alpha_bar
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            eps = predict_eps(model, z, t, provider(t))
            if guidance_scale != 1.0:
                eps_uncond = predict_eps(model, z, t, unconditional)
                eps = eps_uncond + guidance_scale * (eps - eps_uncond)
            ab_t = alpha_bar[t]
            ab_prev = alpha_bar[timesteps[i + 1]] if i + 1 < len(timesteps) else torch.ones((), dtype=torch.float64)
            x0 = (z - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()
            z = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
    logger.debug("Sampled seed=%d steps=%d guidance=%.2f", seed, steps, guidance_scale)
    return z
