"""Latent codecs. The toy backend trains in pixel space through the identity codec."""
import abc
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from app.core.errors import MissingFileError


class LatentCodec(abc.ABC):
    downsample_factor: int = 1

    @abc.abstractmethod
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        ...


class IdentityCodec(LatentCodec):
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) uint8 image -> (C, H, W) float64 in [-1, 1]."""
    arr = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float64)
    return (arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    arr = ((x.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return arr.permute(1, 2, 0).to(torch.uint8).numpy()


def load_rgb(path: Path) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8."""
    if not path.exists():
        raise MissingFileError(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB")).copy()
