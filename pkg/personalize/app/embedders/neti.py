"""Timestep- and layer-conditioned subject embedding network M(t, l)."""
import math

import torch
from torch import nn

from app.core.errors import StepIndexError


class NeTIEmbedder(nn.Module):
    """Maps (denoising timestep t, denoiser layer l) to a d-dimensional token embedding.

    Both indices are normalized to [0, 1] and expanded into sin/cos features
    at ``n_freqs`` octaves before a two-layer MLP.
    """

    def __init__(self, embedding_dim: int, num_timesteps: int, layer_count: int,
                 hidden_dim: int = 64, n_freqs: int = 6) -> None:
        super().__init__()
        self.embedding_dim = embedding_dim
        self.num_timesteps = num_timesteps
        self.layer_count = layer_count
        self.hidden_dim = hidden_dim
        self.n_freqs = n_freqs
        self.net = nn.Sequential(
            nn.Linear(4 * n_freqs, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, embedding_dim),
        )

    @property
    def config(self) -> dict[str, int]:
        return {
            "embedding_dim": self.embedding_dim,
            "num_timesteps": self.num_timesteps,
            "layer_count": self.layer_count,
            "hidden_dim": self.hidden_dim,
            "n_freqs": self.n_freqs,
        }

    def encode_inputs(self, t: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        dtype = self.net[0].weight.dtype
        t_norm = t.to(dtype) / max(self.num_timesteps - 1, 1)
        l_norm = l.to(dtype) / max(self.layer_count - 1, 1)
        freqs = (2.0 ** torch.arange(self.n_freqs, dtype=dtype)) * math.pi
        feats = []
        for v in (t_norm, l_norm):
            angles = v[..., None] * freqs
            feats += [torch.sin(angles), torch.cos(angles)]
        return torch.cat(feats, dim=-1)

    def forward(self, t: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        return self.net(self.encode_inputs(t, l))

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for layer in (self.net[0], self.net[-1]):
                bound = 1.0 / math.sqrt(layer.in_features)
                for param in (layer.weight, layer.bias):
                    param.copy_((torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 - 1) * bound)

    def init_output(self, vector: torch.Tensor, scale: float = 1e-2, generator: torch.Generator | None = None) -> None:
        """Start near a constant output: final bias = ``vector``, small final weights."""
        last = self.net[-1]
        with torch.no_grad():
            last.bias.copy_(vector)
            noise = torch.randn(last.weight.shape, generator=generator, dtype=last.weight.dtype)
            last.weight.copy_(scale * noise)

    def constant(self, vector: torch.Tensor) -> None:
        """Make M(t, l) == ``vector`` for every (t, l)."""
        last = self.net[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.copy_(vector)


def neti_forward(embedder: NeTIEmbedder, t: int, l: int) -> torch.Tensor:
    """M(t, l) for a single (timestep, layer) pair."""
    if not 0 <= t < embedder.num_timesteps:
        raise StepIndexError(f"timestep {t} outside [0, {embedder.num_timesteps})")
    if not 0 <= l < embedder.layer_count:
        raise StepIndexError(f"layer {l} outside [0, {embedder.layer_count})")
    return embedder(torch.tensor([t]), torch.tensor([l]))[0]
