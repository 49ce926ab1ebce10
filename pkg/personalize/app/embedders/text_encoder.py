"""Frozen text encoders.

A text encoder exposes two stages so pseudo-token vectors can be injected
between them: ``input_embeddings`` (token lookup) and ``encode`` (the
contextualizing stack). Encoders are frozen; their outputs depend only on the
input embedding sequence.
"""
import abc
import math

import torch
from torch import nn
from torch.nn import functional as F

from app.embedders.tokenizer import TokenizedPrompt, Tokenizer


class TextEncoder(nn.Module, abc.ABC):
    tokenizer: Tokenizer
    embedding_dim: int

    @property
    def context_length(self) -> int:
        return self.tokenizer.context_length

    @abc.abstractmethod
    def input_embeddings(self, prompt: TokenizedPrompt) -> torch.Tensor:
        """(context_length, d) token embeddings before contextualization."""
        ...

    @abc.abstractmethod
    def encode(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        """(B, n, d) -> (B, n, d) contextual embeddings."""
        ...

    def word_embedding(self, word: str) -> torch.Tensor | None:
        idx = self.tokenizer.token_id(word)
        if idx is None:
            return None
        return self.input_embeddings_by_id(torch.tensor([idx]))[0]

    @abc.abstractmethod
    def input_embeddings_by_id(self, ids: torch.Tensor) -> torch.Tensor:
        ...

    def freeze(self) -> "TextEncoder":
        self.requires_grad_(False)
        self.eval()
        return self


# ─── Toy transformer encoder ───

class _EncoderBlock(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        hd = d // self.heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


class ToyTextEncoder(TextEncoder):
    """Word embeddings + learned positions + a small transformer stack."""

    def __init__(self, tokenizer: Tokenizer, embedding_dim: int, layers: int = 2, heads: int = 2) -> None:
        super().__init__()
        self.tokenizer = tokenizer
        self.embedding_dim = embedding_dim
        self.token_embedding = nn.Embedding(len(tokenizer), embedding_dim)
        self.position_embedding = nn.Parameter(torch.zeros(tokenizer.context_length, embedding_dim))
        self.blocks = nn.ModuleList(_EncoderBlock(embedding_dim, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(embedding_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "final_norm.weight":
                    param.fill_(1.0)
                elif param.ndim == 1:
                    param.zero_()
                elif name == "token_embedding.weight":
                    param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype))
                elif name == "position_embedding":
                    param.copy_(0.1 * torch.randn(param.shape, generator=generator, dtype=param.dtype))
                else:
                    bound = 1.0 / math.sqrt(param.shape[1])
                    param.copy_((torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 - 1) * bound)

    def input_embeddings_by_id(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def input_embeddings(self, prompt: TokenizedPrompt) -> torch.Tensor:
        return self.token_embedding(torch.tensor(prompt.ids))

    def encode(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        n = inputs_embeds.shape[-2]
        x = inputs_embeds + self.position_embedding[:n]
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


# ─── Identity encoder (tests) ───

class IdentityTextEncoder(TextEncoder):
    """Word lookup with no contextualization: ``encode`` returns its input."""

    def __init__(self, tokenizer: Tokenizer, embedding_dim: int, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.tokenizer = tokenizer
        self.embedding_dim = embedding_dim
        self.token_embedding = nn.Embedding(len(tokenizer), embedding_dim)
        if generator is not None:
            with torch.no_grad():
                self.token_embedding.weight.copy_(torch.randn(self.token_embedding.weight.shape, generator=generator))

    def input_embeddings_by_id(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def input_embeddings(self, prompt: TokenizedPrompt) -> torch.Tensor:
        return self.token_embedding(torch.tensor(prompt.ids))

    def encode(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        return inputs_embeds
