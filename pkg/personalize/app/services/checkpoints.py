"""Trainer state and its checkpoint archive.

A checkpoint holds everything needed to continue a run bit-for-bit: the
training config, the token table, NeTI parameters, AdamW moments, the batch
RNG state and the step counter. Its ``tokens`` section has the learned-token
archive layout, so ``load_learned_tokens`` reads checkpoints directly.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from app.core.archive import read_archive, to_arrays, to_tensors, write_archive
from app.core.errors import FormatError
from app.embedders.neti import NeTIEmbedder
from app.embedders.tokens import LearnedTokens, TokenTable
from app.schemas.training import TrainingConfig

logger = logging.getLogger(__name__)


@dataclass
class TrainerState:
    config: TrainingConfig
    subject_id: str
    layer_count: int
    table: TokenTable
    neti: NeTIEmbedder | None
    optimizer: torch.optim.AdamW
    rng: torch.Generator
    step: int = 0

    def parameters(self) -> list[torch.Tensor]:
        params = self.table.parameters()
        if self.neti is not None:
            params += list(self.neti.parameters())
        return params

    def learned_tokens(self) -> LearnedTokens:
        return LearnedTokens(method=self.config.method, subject_id=self.subject_id, table=self.table,
                             neti=self.neti, layer_count=self.layer_count)


def make_optimizer(params: list[torch.Tensor], config: TrainingConfig) -> torch.optim.AdamW:
    """AdamW at a constant learning rate; foreach kernels off for reproducible reductions."""
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay, foreach=False)


# ─── Archive ───

def state_payload(state: TrainerState) -> dict[str, Any]:
    """Array-only snapshot of ``state``; equal payloads mean equal states."""
    return to_arrays({
        "config": state.config.model_dump(mode="json"),
        "subject_id": state.subject_id,
        "step": state.step,
        "tokens": state.learned_tokens().to_payload(),
        "optimizer": state.optimizer.state_dict(),
        "rng_state": state.rng.get_state(),
    })


def save_checkpoint(state: TrainerState, path: str | Path) -> Path:
    return write_archive(state_payload(state), path, kind="trainer-state")


def load_checkpoint(path: str | Path) -> TrainerState:
    payload = read_archive(path, kinds=("trainer-state",))
    try:
        config = TrainingConfig.model_validate(payload["config"])
        tokens = LearnedTokens.from_payload(payload["tokens"])
        table = tokens.table.requires_grad_(True)
        neti = tokens.neti
        params = table.parameters() + (list(neti.parameters()) if neti is not None else [])
        optimizer = make_optimizer(params, config)
        optimizer.load_state_dict(to_tensors(payload["optimizer"]))
        rng = torch.Generator(device="cpu")
        rng.set_state(torch.from_numpy(payload["rng_state"].copy()))
        state = TrainerState(config=config, subject_id=payload["subject_id"], layer_count=tokens.layer_count,
                             table=table, neti=neti, optimizer=optimizer, rng=rng, step=int(payload["step"]))
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"{path}: malformed trainer checkpoint: {exc}") from exc
    logger.info("Loaded checkpoint %s at step %d", path, state.step)
    return state


def checkpoint_step(path: str | Path) -> int:
    """Step counter of a trainer checkpoint; 0 for a bare learned-token archive."""
    payload = read_archive(path, kinds=("trainer-state", "learned-tokens"))
    return int(payload.get("step", 0))
