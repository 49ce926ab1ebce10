"""The diffusion backbone bundle: schedule, denoiser, codec and frozen text encoder."""
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from app.core.archive import read_archive, to_arrays, to_tensors, write_archive
from app.core.determinism import derive_seed, torch_generator
from app.core.errors import FormatError
from app.diffusion.codec import IdentityCodec, LatentCodec, image_to_tensor, tensor_to_image
from app.diffusion.predictor import EpsilonPredictor, ToyEpsilonPredictor
from app.diffusion.schedule import NoiseSchedule, make_noise_schedule
from app.embedders.text_encoder import TextEncoder, ToyTextEncoder
from app.embedders.tokenizer import Tokenizer
from app.schemas.backend import BackboneSpec

logger = logging.getLogger(__name__)


@dataclass
class DiffusionBackend:
    spec: BackboneSpec
    schedule: NoiseSchedule
    model: EpsilonPredictor
    codec: LatentCodec
    text_encoder: TextEncoder

    @property
    def tokenizer(self) -> Tokenizer:
        return self.text_encoder.tokenizer

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.spec.image_size // self.codec.downsample_factor
        return (self.spec.channels, side, side)

    def freeze(self) -> "DiffusionBackend":
        self.model.requires_grad_(False)
        self.model.eval()
        self.text_encoder.freeze()
        return self

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.codec.encode(image_to_tensor(image))

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        return tensor_to_image(self.codec.decode(z))

    def frozen_checksum(self) -> float:
        """Sum of |parameter| over the denoiser and text encoder, for freeze checks."""
        with torch.no_grad():
            params = [*self.model.parameters(), *self.text_encoder.parameters()]
            return float(sum(p.abs().sum() for p in params))


def build_toy_backend(spec: BackboneSpec, vocabulary: Sequence[str], seed: int = 0) -> DiffusionBackend:
    tokenizer = Tokenizer(vocabulary, spec.context_length)
    text_encoder = ToyTextEncoder(tokenizer, spec.embedding_dim, layers=spec.text_layers, heads=spec.text_heads)
    text_encoder = text_encoder.to(torch.float64)
    text_encoder.reset_parameters(torch_generator(derive_seed(seed, "text-encoder")))

    model = ToyEpsilonPredictor(spec.channels, spec.hidden_channels, spec.embedding_dim, spec.layer_count)
    model = model.to(torch.float64)
    model.reset_parameters(torch_generator(derive_seed(seed, "denoiser")))

    backend = DiffusionBackend(
        spec=spec,
        schedule=make_noise_schedule(spec.num_timesteps, spec.schedule_kind),
        model=model,
        codec=IdentityCodec(),
        text_encoder=text_encoder,
    )
    logger.info("Built toy backend: %d layers, d=%d, vocabulary=%d, T=%d",
                spec.layer_count, spec.embedding_dim, len(tokenizer), spec.num_timesteps)
    return backend.freeze()


# ─── Archive ───

def save_backend(backend: DiffusionBackend, path: str | Path) -> Path:
    payload = {
        "spec": backend.spec.model_dump(),
        "vocabulary": list(backend.tokenizer.vocabulary),
        "schedule": {"kind": backend.schedule.kind, "T": backend.schedule.T, "betas": backend.schedule.betas},
        "model": backend.model.state_dict(),
        "text_encoder": backend.text_encoder.state_dict(),
    }
    return write_archive(to_arrays(payload), path, kind="backend")


def load_backend(path: str | Path) -> DiffusionBackend:
    payload = read_archive(path, kinds=("backend",))
    try:
        spec = BackboneSpec.model_validate(payload["spec"])
        backend = build_toy_backend(spec, payload["vocabulary"])
        state = to_tensors({"model": payload["model"], "text_encoder": payload["text_encoder"]})
        backend.model.load_state_dict(state["model"])
        backend.text_encoder.load_state_dict(state["text_encoder"])
        if payload["schedule"]["kind"] != spec.schedule_kind or payload["schedule"]["T"] != spec.num_timesteps:
            raise FormatError(f"{path}: schedule metadata disagrees with the backbone spec")
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"{path}: malformed backend archive: {exc}") from exc
    logger.info("Loaded backend from %s", path)
    return backend.freeze()
