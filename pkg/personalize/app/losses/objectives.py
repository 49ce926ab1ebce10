"""Training objectives: masked and joint denoising losses, InfoNCE and the weighted total."""
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, NamedTuple

import torch

from app.core.errors import DimensionError, EmptyPositiveError, NonFiniteError, ShapeError, SpecError
from app.losses.weighting import schedule_weight
from app.schemas.training import LossWeights, WeightSchedule

logger = logging.getLogger(__name__)

VectorPair = tuple[torch.Tensor, torch.Tensor]


class MaskedLoss(NamedTuple):
    value: torch.Tensor
    empty: bool  # mask selected nothing; value is 0


# ─── Denoising losses ───

def masked_mse(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    mask: torch.Tensor,
    normalize: bool = True,
) -> MaskedLoss:
    """‖M∘(eps − eps_hat)‖² over masked elements.

    ``mask`` matches ``eps`` or is (H, W) / (B, H, W) broadcast over channels. With
    ``normalize`` the sum is divided by the number of masked elements
    (channels included); otherwise the raw sum is returned.
    """
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} and eps_hat {tuple(eps_hat.shape)} differ")
    if mask.shape == eps.shape:
        m = mask.to(eps.dtype)
    elif mask.ndim <= eps.ndim - 1 and mask.shape[-2:] == eps.shape[-2:]:
        m = mask.to(eps.dtype).unsqueeze(-3).expand_as(eps)
    else:
        raise ShapeError(f"mask {tuple(mask.shape)} does not broadcast over latent {tuple(eps.shape)}")
    count = m.sum()
    if float(count) == 0.0:
        logger.warning("masked_mse: empty mask, loss defined as 0")
        return MaskedLoss(value=(eps_hat * 0.0).sum(), empty=True)
    total = (m * (eps - eps_hat) ** 2).sum()
    return MaskedLoss(value=total / count if normalize else total, empty=False)


def joint_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} and eps_hat {tuple(eps_hat.shape)} differ")
    return ((eps - eps_hat) ** 2).mean()


# ─── Contrastive ───

def _similarities(pairs: Sequence[VectorPair], tau: float, normalize: bool, dim: int) -> torch.Tensor:
    a = torch.stack([p[0] for p in pairs])
    b = torch.stack([p[1] for p in pairs])
    if a.shape[-1] != dim or b.shape[-1] != dim:
        raise DimensionError(f"all vectors must have dimension {dim}")
    if normalize:
        a = torch.nn.functional.normalize(a, dim=-1)
        b = torch.nn.functional.normalize(b, dim=-1)
    return (a * b).sum(-1) / tau


def info_nce(
    positive_pairs: Sequence[VectorPair],
    negative_pairs: Sequence[VectorPair],
    tau: float,
    normalize: bool = True,
) -> torch.Tensor:
    """−log Σ_P e^s / (Σ_P e^s + Σ_N e^s) with s = sim(a, b) / tau, via log-sum-exp."""
    if not positive_pairs:
        raise EmptyPositiveError("info_nce needs at least one positive pair")
    if tau <= 0:
        raise SpecError(f"tau must be positive, got {tau}")
    dims = {int(v.shape[-1]) for pair in (*positive_pairs, *negative_pairs) for v in pair}
    if len(dims) != 1:
        raise DimensionError(f"mixed vector dimensions {sorted(dims)}")
    dim = dims.pop()
    pos = _similarities(positive_pairs, tau, normalize, dim)
    if not negative_pairs:
        return (pos * 0.0).sum()
    neg = _similarities(negative_pairs, tau, normalize, dim)
    return torch.logsumexp(torch.cat([pos, neg]), dim=0) - torch.logsumexp(pos, dim=0)


# ─── Weighted total ───

@dataclass(frozen=True)
class LossBreakdown:
    l_sub: torch.Tensor
    l_bg: torch.Tensor
    l_joint: torch.Tensor
    l_infonce: torch.Tensor
    total: torch.Tensor
    w_c_effective: float

    def as_floats(self) -> dict[str, float]:
        return {
            "l_sub": float(self.l_sub),
            "l_bg": float(self.l_bg),
            "l_joint": float(self.l_joint),
            "l_infonce": float(self.l_infonce),
            "total": float(self.total),
            "w_c_effective": self.w_c_effective,
        }


def total_loss(
    l_sub: torch.Tensor | float,
    l_bg: torch.Tensor | float,
    l_joint: torch.Tensor | float,
    l_infonce: torch.Tensor | float,
    weights: LossWeights,
    step: int,
    schedule: WeightSchedule,
) -> LossBreakdown:
    parts = {
        "l_sub": torch.as_tensor(l_sub, dtype=torch.float64),
        "l_bg": torch.as_tensor(l_bg, dtype=torch.float64),
        "l_joint": torch.as_tensor(l_joint, dtype=torch.float64),
        "l_infonce": torch.as_tensor(l_infonce, dtype=torch.float64),
    }
    for name, value in parts.items():
        if not math.isfinite(float(value)):
            raise NonFiniteError(name, float(value))
    w_c = schedule_weight(step, schedule, weights.w_c_max)
    total = (
        weights.w_s * parts["l_sub"]
        + weights.w_b * parts["l_bg"]
        + weights.w_i * parts["l_joint"]
        + w_c * parts["l_infonce"]
    )
    if not math.isfinite(float(total)):
        raise NonFiniteError("total", float(total))
    return LossBreakdown(total=total, w_c_effective=w_c, **parts)


def loss_trace_record(step: int, breakdown: LossBreakdown) -> dict[str, Any]:
    """One line of the loss trace."""
    return {"step": step, **breakdown.as_floats()}
