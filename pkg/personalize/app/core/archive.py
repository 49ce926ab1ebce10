"""Versioned joblib archives for backends, learned tokens and trainer state.

Every archive is a plain dict with ``format_version`` and ``kind`` keys plus
numpy arrays keyed by hierarchical names. Tensors are stored as numpy arrays
so the bytes depend only on values, never on torch internals.
"""
import io
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import joblib
import numpy as np
import torch

from app.core.errors import FormatError, MissingFileError, VersionError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


# ─── Tensor <-> array conversion ───

def to_arrays(state: Mapping[str, Any]) -> dict[str, Any]:
    """Recursively convert tensors to numpy arrays (values copied)."""
    out: dict[str, Any] = {}
    for key, value in state.items():
        if isinstance(value, torch.Tensor):
            out[key] = value.detach().cpu().numpy().copy()
        elif isinstance(value, Mapping):
            out[key] = to_arrays(value)
        else:
            out[key] = value
    return out


def to_tensors(state: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in state.items():
        if isinstance(value, np.ndarray):
            out[key] = torch.from_numpy(value.copy())
        elif isinstance(value, Mapping):
            out[key] = to_tensors(value)
        else:
            out[key] = value
    return out


# ─── Read / write ───

def write_archive(payload: dict[str, Any], path: str | Path, kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    joblib.dump({"format_version": FORMAT_VERSION, "kind": kind, **payload}, buf)
    path.write_bytes(buf.getvalue())
    logger.info("Wrote %s archive %s (%d bytes)", kind, path, buf.tell())
    return path


def read_archive(path: str | Path, kinds: tuple[str, ...]) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    try:
        payload = joblib.load(path)
    except Exception as exc:
        raise FormatError(f"{path} is not a readable archive: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload or "kind" not in payload:
        raise FormatError(f"{path} lacks format_version/kind headers")
    if payload["format_version"] != FORMAT_VERSION:
        raise VersionError(f"{path} has format_version {payload['format_version']}, expected {FORMAT_VERSION}")
    if payload["kind"] not in kinds:
        raise FormatError(f"{path} is a {payload['kind']!r} archive, expected one of {kinds}")
    return payload
