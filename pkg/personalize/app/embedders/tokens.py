"""Learnable pseudo-token embeddings: the subject token v* and per-image attractors A*_k."""
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

import torch

from app.core.archive import read_archive, to_arrays, to_tensors, write_archive
from app.core.determinism import torch_generator
from app.core.errors import FormatError, InitError, UnknownTokenError
from app.embedders.neti import NeTIEmbedder
from app.embedders.text_encoder import TextEncoder
from app.schemas.dataset import SubjectRecord

logger = logging.getLogger(__name__)

ATTRACTOR_INIT_WORD = "background"
ATTRACTOR_INIT_NOISE = 1e-3

InitRule = Literal["supercategory_word", "random"]


class Method(StrEnum):
    TI = "ti"
    NETI = "neti"


@dataclass
class TokenTable:
    subject: torch.Tensor
    attractors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.subject.shape[-1])

    def attractor(self, image_id: str) -> torch.Tensor:
        try:
            return self.attractors[image_id]
        except KeyError:
            raise UnknownTokenError(f"no attractor registered for image {image_id!r}") from None

    def parameters(self) -> list[torch.Tensor]:
        return [self.subject, *(self.attractors[k] for k in sorted(self.attractors))]

    def requires_grad_(self, flag: bool = True) -> "TokenTable":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def state_dict(self) -> dict[str, Any]:
        return {"subject": self.subject, "attractors": {k: self.attractors[k] for k in sorted(self.attractors)}}

    @classmethod
    def from_state_dict(cls, state: dict[str, Any]) -> "TokenTable":
        return cls(subject=state["subject"], attractors=dict(state["attractors"]))


def register_tokens(
    subject: SubjectRecord,
    encoder: TextEncoder,
    d: int | None = None,
    init: InitRule = "supercategory_word",
    seed: int = 0,
) -> TokenTable:
    """Create v* and one attractor per training image.

    v* starts from the supercategory word embedding (or Gaussian noise at the
    vocabulary's scale); each A*_k starts from the "background" embedding plus
    1e-3 Gaussian noise so attractors are distinct from the first step.
    """
    d = encoder.embedding_dim if d is None else d
    if d != encoder.embedding_dim:
        raise InitError(f"token dimension {d} does not match text encoder dimension {encoder.embedding_dim}")
    gen = torch_generator(seed)
    with torch.no_grad():
        vocab = encoder.input_embeddings_by_id(torch.arange(len(encoder.tokenizer)))
        dtype = vocab.dtype
        if init == "supercategory_word":
            word = encoder.word_embedding(subject.supercategory)
            if word is None:
                raise InitError(f"supercategory word {subject.supercategory!r} is not in the encoder vocabulary")
            v_star = word.clone()
        elif init == "random":
            v_star = torch.randn(d, generator=gen, dtype=dtype) * vocab.std()
        else:
            raise InitError(f"unknown init rule {init!r}")

        base = encoder.word_embedding(ATTRACTOR_INIT_WORD)
        if base is None:
            raise InitError(f"attractor init word {ATTRACTOR_INIT_WORD!r} is not in the encoder vocabulary")
        attractors = {
            record.image_id: base + ATTRACTOR_INIT_NOISE * torch.randn(d, generator=gen, dtype=dtype)
            for record in subject.train
        }
    table = TokenTable(subject=v_star.detach().clone(), attractors={k: v.detach().clone() for k, v in attractors.items()})
    logger.info("Registered tokens for %s: d=%d, %d attractors, init=%s", subject.id, d, len(attractors), init)
    return table


# ─── Learned-token archive ───

@dataclass
class LearnedTokens:
    method: Method
    subject_id: str
    table: TokenTable
    neti: NeTIEmbedder | None
    layer_count: int

    @property
    def embedding_dim(self) -> int:
        return self.table.dim

    def to_payload(self) -> dict[str, Any]:
        return {
            "method": str(self.method),
            "subject_id": self.subject_id,
            "embedding_dim": self.embedding_dim,
            "layer_count": self.layer_count,
            "table": to_arrays(self.table.state_dict()),
            "neti_config": self.neti.config if self.neti is not None else None,
            "neti": to_arrays(self.neti.state_dict()) if self.neti is not None else None,
        }

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> "LearnedTokens":
        try:
            table = TokenTable.from_state_dict(to_tensors(payload["table"]))
            neti = None
            if payload.get("neti") is not None:
                neti = NeTIEmbedder(**payload["neti_config"]).to(table.subject.dtype)
                neti.load_state_dict(to_tensors(payload["neti"]))
            return cls(method=Method(payload["method"]), subject_id=payload["subject_id"], table=table,
                       neti=neti, layer_count=int(payload["layer_count"]))
        except (KeyError, TypeError, ValueError, RuntimeError) as exc:
            raise FormatError(f"malformed learned-token payload: {exc}") from exc


def export_learned_tokens(tokens: LearnedTokens, path: str | Path) -> Path:
    return write_archive(tokens.to_payload(), path, kind="learned-tokens")


def load_learned_tokens(path: str | Path) -> LearnedTokens:
    """Read a learned-token archive, or the token section of a trainer checkpoint."""
    payload = read_archive(path, kinds=("learned-tokens", "trainer-state"))
    if payload["kind"] == "trainer-state":
        payload = payload["tokens"]
    return LearnedTokens.from_payload(payload)
