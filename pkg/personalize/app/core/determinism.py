"""Seed derivation and reproducibility switches.

All randomness in the package flows through explicit generators seeded from
these helpers; nothing reads or writes global RNG state.
"""
import hashlib

import numpy as np
import torch


def stable_hash(*parts: object) -> int:
    """64-bit hash of ``parts`` that is stable across processes and platforms."""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def derive_seed(base: int, *parts: object) -> int:
    """Child seed for a named sub-stream of ``base`` (31-bit, torch/numpy safe)."""
    state = np.random.SeedSequence([base & 0xFFFFFFFF, stable_hash(*parts) & 0xFFFFFFFF])
    return int(state.generate_state(1)[0] & 0x7FFFFFFF)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def enable_determinism() -> None:
    """Make CPU kernels bitwise reproducible run to run."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
