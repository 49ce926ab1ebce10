"""Epsilon-predictor interface and the toy cross-attention denoiser."""
import abc
import logging
import math
from collections.abc import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from app.core.errors import ConditioningError, ShapeError
from app.embedders.conditioning import ConditioningBundle, stack_contexts

logger = logging.getLogger(__name__)


# ─── Abstract base ───

class EpsilonPredictor(nn.Module, abc.ABC):
    """ε_θ(z_t, t, contexts): one (B, n, d) context tensor per conditioned layer."""

    channels: int
    layer_count: int

    @abc.abstractmethod
    def forward(self, z_t: torch.Tensor, t: torch.Tensor, contexts: Sequence[torch.Tensor]) -> torch.Tensor:
        ...


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# ─── Toy denoiser ───

class ConditionedBlock(nn.Module):
    """Residual conv block with a timestep shift and cross-attention to one context sequence."""

    def __init__(self, hidden: int, context_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(4, hidden)
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.time_proj = nn.Linear(hidden, hidden)
        self.norm2 = nn.GroupNorm(4, hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.attn_norm = nn.GroupNorm(4, hidden)
        self.to_q = nn.Linear(hidden, hidden, bias=False)
        self.to_k = nn.Linear(context_dim, hidden, bias=False)
        self.to_v = nn.Linear(context_dim, hidden, bias=False)
        self.to_out = nn.Linear(hidden, hidden)

    def forward(self, h: torch.Tensor, temb: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        r = self.conv1(F.silu(self.norm1(h)))
        r = r + self.time_proj(temb)[:, :, None, None]
        h = h + self.conv2(F.silu(self.norm2(r)))

        b, c, hh, ww = h.shape
        x = self.attn_norm(h).reshape(b, c, hh * ww).transpose(1, 2)   # (B, HW, C)
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)  # k, v: (B, n, C)
        out = self.to_out(F.scaled_dot_product_attention(q, k, v)).transpose(1, 2).reshape(b, c, hh, ww)
        return h + out


class ToyEpsilonPredictor(EpsilonPredictor):
    """conv_in -> L conditioned blocks (block l attends to context l) -> conv_out."""

    def __init__(self, channels: int, hidden_channels: int, context_dim: int, layer_count: int) -> None:
        super().__init__()
        self.channels = channels
        self.hidden_channels = hidden_channels
        self.layer_count = layer_count
        self.conv_in = nn.Conv2d(channels, hidden_channels, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(hidden_channels, hidden_channels), nn.SiLU(), nn.Linear(hidden_channels, hidden_channels)
        )
        self.blocks = nn.ModuleList(ConditionedBlock(hidden_channels, context_dim) for _ in range(layer_count))
        self.norm_out = nn.GroupNorm(4, hidden_channels)
        self.conv_out = nn.Conv2d(hidden_channels, channels, 3, padding=1)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for name, param in self.named_parameters():
                if "norm" in name:
                    param.fill_(1.0 if name.endswith("weight") else 0.0)
                elif param.ndim == 1:
                    param.zero_()
                else:
                    fan_in = param[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    param.copy_((torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 - 1) * bound)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, contexts: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(contexts) != self.layer_count:
            raise ConditioningError(f"denoiser has {self.layer_count} layers, got {len(contexts)} contexts")
        temb = self.time_mlp(timestep_embedding(t, self.hidden_channels, z_t.dtype))
        h = self.conv_in(z_t)
        for block, context in zip(self.blocks, contexts, strict=True):
            h = block(h, temb, context)
        return self.conv_out(F.silu(self.norm_out(h)))


# ─── Public API ───

def predict_eps(
    model: EpsilonPredictor,
    z_t: torch.Tensor,
    t: int | torch.Tensor,
    conditioning: ConditioningBundle | Sequence[ConditioningBundle],
) -> torch.Tensor:
    """ε̂ for one latent (C, H, W) with one bundle, or a batch (B, C, H, W) with B bundles."""
    single = z_t.ndim == 3
    bundles = [conditioning] if isinstance(conditioning, ConditioningBundle) else list(conditioning)
    batch = z_t[None] if single else z_t
    if batch.ndim != 4 or batch.shape[1] != model.channels:
        raise ShapeError(f"expected latent with {model.channels} channels, got shape {tuple(z_t.shape)}")
    if len(bundles) != batch.shape[0]:
        raise ShapeError(f"{batch.shape[0]} latents but {len(bundles)} conditioning bundles")
    steps = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(batch.shape[0])
    contexts = stack_contexts(bundles, model.layer_count)
    out = model(batch, steps, contexts)
    return out[0] if single else out
