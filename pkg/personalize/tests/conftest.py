"""Shared fixtures: a tiny toy dataset on disk and a tiny float64 backbone.

Everything here is small enough that a full training step takes milliseconds
on a laptop CPU.
"""
import pytest
import torch

from app.diffusion.backend import DiffusionBackend, build_toy_backend
from app.embedders.text_encoder import IdentityTextEncoder
from app.embedders.tokenizer import DEFAULT_VOCABULARY, Tokenizer, build_vocabulary
from app.schemas.backend import BackboneSpec
from app.schemas.dataset import DatasetManifest, ToyDatasetSpec
from app.schemas.training import TrainingConfig
from app.services.toy_data import synth_toy_dataset

# 2 subjects x (2 train + 2 test) images, 3 captions per test image.
TOY_SPEC = ToyDatasetSpec(n_subjects=2, images_per_subject=4, train_fraction=0.5, image_size=8, seed=3,
                          captions_per_image=3)

TINY_BACKBONE = BackboneSpec(
    image_size=8,
    embedding_dim=8,
    context_length=24,
    hidden_channels=8,
    layer_count=2,
    num_timesteps=50,
    schedule_kind="linear",
    text_layers=1,
    text_heads=2,
)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> DatasetManifest:
    return synth_toy_dataset(TOY_SPEC, tmp_path_factory.mktemp("toy"))


@pytest.fixture()
def tiny_backend(toy_manifest) -> DiffusionBackend:
    return build_toy_backend(TINY_BACKBONE, build_vocabulary(toy_manifest), seed=0)


@pytest.fixture()
def identity_encoder() -> IdentityTextEncoder:
    tokenizer = Tokenizer(DEFAULT_VOCABULARY, context_length=16)
    gen = torch.Generator().manual_seed(11)
    return IdentityTextEncoder(tokenizer, 8, generator=gen).to(torch.float64).freeze()


@pytest.fixture()
def tiny_config() -> TrainingConfig:
    return TrainingConfig.for_method("ti+", total_steps=4, batch_size=4, learning_rate=1e-2,
                                     checkpoint_interval=2, seed=0)
