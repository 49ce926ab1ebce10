"""Embedding models for similarity scoring.

Families:
  contrastive-text-image  : shared text/image space (text-image and image-image scores)
  self-supervised-image   : image-only space (image-image scores)

The bundled implementations are deterministic stubs: Gaussian random
projections of pixel statistics (images) and hashed bag-of-words vectors
(text), seeded from a stable hash of the family tag. They need no model
downloads. Real encoders plug in by subclassing the abstract bases.
"""
import abc
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.random_projection import GaussianRandomProjection

from app.core.config import settings
from app.core.determinism import stable_hash
from app.core.errors import DimensionError
from app.services.manifest import caption_words

logger = logging.getLogger(__name__)

CONTRASTIVE_FAMILY = "contrastive-text-image"
SELF_SUPERVISED_FAMILY = "self-supervised-image"


# ─── Abstract base ───

class EmbeddingModel(abc.ABC):
    family: str
    dim: int

    @abc.abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) uint8 image -> unit vector of length ``dim``."""
        ...


class TextImageModel(EmbeddingModel):
    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        ...


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DimensionError("cannot normalize a zero embedding")
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit vectors, clipped to [-1, 1]."""
    if a.shape != b.shape:
        raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ─── Stub family ───

def _pixel_features(image: np.ndarray) -> np.ndarray:
    x = image.astype(np.float64) / 127.5 - 1.0
    means = x.reshape(-1, x.shape[-1]).mean(axis=0)
    return np.concatenate([x.ravel(), means, [1.0]])


def _structure_features(image: np.ndarray) -> np.ndarray:
    x = image.astype(np.float64) / 127.5 - 1.0
    gy = np.diff(x, axis=0).ravel()
    gx = np.diff(x, axis=1).ravel()
    return np.concatenate([x.ravel(), gy, gx, [1.0]])


class _ProjectionEmbedder:
    """Random projection to ``dim`` dimensions, fitted lazily per input width."""

    def __init__(self, family: str, dim: int) -> None:
        self.family = family
        self.dim = dim
        self._projectors: dict[int, GaussianRandomProjection] = {}

    def project(self, features: np.ndarray) -> np.ndarray:
        width = features.shape[0]
        projector = self._projectors.get(width)
        if projector is None:
            projector = GaussianRandomProjection(
                n_components=self.dim, random_state=stable_hash(self.family, width) % (2**32)
            )
            projector.fit(np.zeros((1, width)))
            self._projectors[width] = projector
        return _unit(projector.transform(features[None])[0])


class StubTextImageModel(TextImageModel):
    family = CONTRASTIVE_FAMILY

    def __init__(self, dim: int = settings.STUB_EMBEDDING_DIM) -> None:
        self.dim = dim
        self._images = _ProjectionEmbedder(self.family, dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._images.project(_pixel_features(image))

    def embed_text(self, text: str) -> np.ndarray:
        words = sorted(caption_words(text)) or [""]
        total = np.zeros(self.dim)
        for word in words:
            rng = np.random.default_rng(stable_hash(self.family, "word", word))
            total += rng.standard_normal(self.dim)
        return _unit(total)


class StubImageModel(EmbeddingModel):
    family = SELF_SUPERVISED_FAMILY

    def __init__(self, dim: int = settings.STUB_EMBEDDING_DIM) -> None:
        self.dim = dim
        self._images = _ProjectionEmbedder(self.family, dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._images.project(_structure_features(image))


# ─── Factory ───

@dataclass(frozen=True)
class EmbeddingSuite:
    text_image: TextImageModel
    image: EmbeddingModel


def default_suite(dim: int = settings.STUB_EMBEDDING_DIM) -> EmbeddingSuite:
    return EmbeddingSuite(text_image=StubTextImageModel(dim), image=StubImageModel(dim))
