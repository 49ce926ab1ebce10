"""Subject/background mask ingestion.

Segmentation itself happens upstream; this module binarizes precomputed
single-channel masks (0 = background, 255 = subject) and derives the
complementary background mask.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from app.core.config import settings
from app.core.errors import MissingFileError, ShapeError, SpecError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPair:
    subject: np.ndarray     # M_s, uint8 in {0, 1}
    background: np.ndarray  # M_b = 1 - M_s

    @property
    def shape(self) -> tuple[int, int]:
        return self.subject.shape  # type: ignore[return-value]


# ─── Binarization ───

def ingest_mask(mask_image: np.ndarray, threshold: float = settings.MASK_THRESHOLD) -> MaskPair:
    """Binarize a grayscale mask: M_s = (value >= threshold), M_b = 1 - M_s.

    uint8 inputs are 8-bit mask images and are scaled by 1/255 first; every
    other dtype is taken as already normalized.
    """
    if not 0.0 < threshold < 1.0:
        raise SpecError(f"threshold must lie in (0, 1), got {threshold}")
    arr = np.asarray(mask_image)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2D, got shape {arr.shape}")
    values = arr.astype(np.float64)
    if arr.dtype == np.uint8:
        values /= 255.0
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ShapeError("mask values must lie in [0, 1] after normalization")

    subject = (values >= threshold).astype(np.uint8)
    return MaskPair(subject=subject, background=(1 - subject).astype(np.uint8))


def load_mask_file(path: Path, threshold: float = settings.MASK_THRESHOLD) -> MaskPair:
    if not path.exists():
        raise MissingFileError(path)
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    return ingest_mask(gray, threshold)


# ─── Latent-resolution helpers ───

def downsample_mask(pair: MaskPair, factor: int) -> MaskPair:
    """Area-majority downsampling: a cell is subject iff >= 0.5 of it is subject.

    The background mask is re-derived from the result, so complementarity holds
    at every resolution.
    """
    if factor == 1:
        return pair
    h, w = pair.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask shape {pair.shape} not divisible by factor {factor}")
    coverage = pair.subject.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    subject = (coverage >= 0.5).astype(np.uint8)
    return MaskPair(subject=subject, background=(1 - subject).astype(np.uint8))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """(top, left, bottom, right) of the subject region, bottom/right exclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        logger.warning("mask_bbox: empty subject mask")
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1
