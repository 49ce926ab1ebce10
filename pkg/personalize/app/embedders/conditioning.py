"""Prompt conditioning with pseudo-token injection.

``embed_prompt`` swaps the learned vectors into the frozen input embedding
sequence at the recorded pseudo-token slots and runs the text encoder. The TI
path produces one contextual sequence shared by every denoiser layer; the NeTI
path produces one sequence per layer, with the v* slot of layer l holding
M(t, l) while attractor slots stay flat.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import torch

from app.core.errors import ConditioningError, InitError, UnknownTokenError
from app.embedders.neti import NeTIEmbedder
from app.embedders.text_encoder import TextEncoder
from app.embedders.tokenizer import ATTRACTOR_TOKEN, SUBJECT_TOKEN
from app.embedders.tokens import Method, TokenTable

logger = logging.getLogger(__name__)


@dataclass
class ConditioningBundle:
    method: Method
    sequences: list[torch.Tensor]        # (n, d) encoder outputs; 1 for TI, L for NeTI
    token_positions: dict[str, int]
    input_embeddings: list[torch.Tensor]  # pre-encoder sequences, parallel to ``sequences``

    @property
    def layer_count(self) -> int | None:
        """Number of per-layer sequences, or None when one sequence is shared."""
        return len(self.sequences) if self.method == Method.NETI else None

    def layer(self, index: int) -> torch.Tensor:
        if self.method == Method.TI:
            return self.sequences[0]
        if not 0 <= index < len(self.sequences):
            raise ConditioningError(
                f"conditioning has {len(self.sequences)} layer sequences, layer {index} requested"
            )
        return self.sequences[index]


def _inject(base: torch.Tensor, slots: dict[int, torch.Tensor]) -> torch.Tensor:
    if not slots:
        return base
    rows = list(base.unbind(0))
    for pos, vec in slots.items():
        rows[pos] = vec.to(base.dtype)
    return torch.stack(rows)


def embed_prompt(
    prompt: str,
    table: TokenTable,
    encoder: TextEncoder,
    *,
    method: Method = Method.TI,
    t: int | None = None,
    image_id: str | None = None,
    neti: NeTIEmbedder | None = None,
) -> ConditioningBundle:
    if table.dim != encoder.embedding_dim:
        raise InitError(f"token table dimension {table.dim} does not match text encoder dimension {encoder.embedding_dim}")
    tokenized = encoder.tokenizer(prompt)
    positions = dict(tokenized.pseudo_positions)
    with torch.no_grad():
        base = encoder.input_embeddings(tokenized)

    flat: dict[int, torch.Tensor] = {}
    if ATTRACTOR_TOKEN in positions:
        if image_id is None:
            raise UnknownTokenError(f"prompt {prompt!r} uses {ATTRACTOR_TOKEN} but no image_id was given")
        flat[positions[ATTRACTOR_TOKEN]] = table.attractor(image_id)

    if method == Method.TI:
        if SUBJECT_TOKEN in positions:
            flat[positions[SUBJECT_TOKEN]] = table.subject
        inputs = _inject(base, flat)
        encoded = encoder.encode(inputs[None])[0]
        return ConditioningBundle(method=method, sequences=[encoded], token_positions=positions,
                                  input_embeddings=[inputs])

    if neti is None:
        raise ConditioningError("NeTI conditioning requires a NeTIEmbedder")
    if t is None:
        raise ConditioningError("NeTI conditioning requires a timestep")
    if not 0 <= t < neti.num_timesteps:
        raise ConditioningError(f"timestep {t} outside [0, {neti.num_timesteps})")
    layers = neti.layer_count
    if SUBJECT_TOKEN in positions:
        subject_vectors = neti(torch.full((layers,), t, dtype=torch.long), torch.arange(layers))
        per_layer = [_inject(base, {**flat, positions[SUBJECT_TOKEN]: subject_vectors[l]}) for l in range(layers)]
    else:
        shared = _inject(base, flat)
        per_layer = [shared] * layers
    encoded = encoder.encode(torch.stack(per_layer))
    return ConditioningBundle(method=method, sequences=list(encoded.unbind(0)), token_positions=positions,
                              input_embeddings=per_layer)


def extract_contextual(bundle: ConditioningBundle, token: str, layer: int = 0) -> torch.Tensor:
    """Post-encoder vector at ``token``'s slot in the given layer's sequence."""
    if token not in bundle.token_positions:
        raise UnknownTokenError(f"{token} is not present in this conditioning")
    return bundle.layer(layer)[bundle.token_positions[token]]


def stack_contexts(bundles: Sequence[ConditioningBundle], layer_count: int) -> list[torch.Tensor]:
    """Per-layer (B, n, d) context tensors for a batch of bundles."""
    for bundle in bundles:
        if bundle.method == Method.NETI and len(bundle.sequences) != layer_count:
            raise ConditioningError(
                f"NeTI conditioning supplies {len(bundle.sequences)} layer sequences, denoiser has {layer_count}"
            )
    return [torch.stack([bundle.layer(l) for bundle in bundles]) for l in range(layer_count)]


def plain_bundle(prompt: str, encoder: TextEncoder) -> ConditioningBundle:
    """Conditioning for a prompt without pseudo-tokens (pretraining, unconditional guidance)."""
    tokenized = encoder.tokenizer(prompt)
    if tokenized.pseudo_positions:
        raise ConditioningError(f"prompt {prompt!r} contains pseudo-tokens; use embed_prompt")
    with torch.no_grad():
        inputs = encoder.input_embeddings(tokenized)
        encoded = encoder.encode(inputs[None])[0]
    return ConditioningBundle(method=Method.TI, sequences=[encoded], token_positions={}, input_embeddings=[inputs])
