"""Personalization training loop.

Each step draws a same-subject batch, routes every record to its loss by
prompt pool (subject pool -> subject-masked loss, background pool ->
background-masked loss, joint pool -> unmasked loss), adds the scheduled
InfoNCE term over the batch's contextual v* embeddings and applies one AdamW
update to v*, the attractors and the NeTI network. The backbone and text
encoder never change.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from app.core.determinism import derive_seed, enable_determinism, torch_generator
from app.core.errors import DataError, MissingFileError, ParseError, ShapeError
from app.diffusion.backend import DiffusionBackend
from app.diffusion.codec import load_rgb
from app.diffusion.predictor import predict_eps
from app.diffusion.schedule import add_noise
from app.embedders.conditioning import ConditioningBundle, embed_prompt, extract_contextual
from app.embedders.neti import NeTIEmbedder
from app.embedders.tokenizer import ATTRACTOR_TOKEN, SUBJECT_TOKEN
from app.embedders.tokens import Method, register_tokens
from app.losses.objectives import LossBreakdown, info_nce, joint_loss, loss_trace_record, masked_mse, total_loss
from app.schemas.dataset import DatasetManifest, SubjectRecord
from app.schemas.training import TrainingConfig
from app.services.checkpoints import TrainerState, load_checkpoint, make_optimizer, save_checkpoint
from app.services.masks import downsample_mask, load_mask_file
from app.services.prompts import POOL_ORDER, PoolKind, PromptPools, build_prompt_pools

logger = logging.getLogger(__name__)

TRACE_FILE = "loss_trace.jsonl"
FINAL_CHECKPOINT = "final.ckpt"


def load_training_config(path: str | Path) -> TrainingConfig:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    try:
        return TrainingConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ParseError(f"Malformed training config {path}: {exc}") from exc


# ─── Subject data ───

@dataclass(frozen=True)
class SubjectImages:
    """Training images of one subject at latent resolution."""

    subject_id: str
    image_ids: tuple[str, ...]
    latents: torch.Tensor           # (K, C, h, w)
    subject_masks: torch.Tensor     # (K, h, w) in {0, 1}
    background_masks: torch.Tensor  # (K, h, w), 1 - subject_masks


def get_subject(manifest: DatasetManifest, subject_id: str) -> SubjectRecord:
    try:
        return manifest.subject(subject_id)
    except KeyError:
        raise DataError(f"subject {subject_id!r} is not in the manifest") from None


def _require_masks(subject: SubjectRecord) -> None:
    if not subject.train:
        raise DataError(f"subject {subject.id} has no training images")
    for record in subject.train:
        if record.mask is None:
            raise DataError(f"training image {record.image} of {subject.id} has no mask")


def load_subject_images(
    manifest: DatasetManifest,
    subject_id: str,
    backend: DiffusionBackend,
    threshold: float = 0.5,
) -> SubjectImages:
    subject = get_subject(manifest, subject_id)
    _require_masks(subject)
    factor = backend.codec.downsample_factor
    latents, subj, bg = [], [], []
    for record in subject.train:
        image = load_rgb(manifest.resolve(record.image))
        pair = load_mask_file(manifest.resolve(record.mask), threshold)  # type: ignore[arg-type]
        if pair.shape != image.shape[:2]:
            raise ShapeError(f"mask {record.mask} is {pair.shape}, image is {image.shape[:2]}")
        pair = downsample_mask(pair, factor)
        latents.append(backend.encode_image(image))
        subj.append(torch.from_numpy(pair.subject.astype("float64")))
        bg.append(torch.from_numpy(pair.background.astype("float64")))
    return SubjectImages(
        subject_id=subject_id,
        image_ids=tuple(r.image_id for r in subject.train),
        latents=torch.stack(latents),
        subject_masks=torch.stack(subj),
        background_masks=torch.stack(bg),
    )


# ─── Batches ───

@dataclass(frozen=True)
class BatchRecord:
    image_id: str
    image_index: int
    pool: PoolKind
    prompt: str
    t: int


@dataclass(frozen=True)
class TrainingBatch:
    subject_id: str
    records: tuple[BatchRecord, ...]
    noise: torch.Tensor  # (B, C, h, w)


def assemble_batch(
    manifest: DatasetManifest,
    subject_id: str,
    pools: PromptPools,
    config: TrainingConfig,
    rng: torch.Generator,
    *,
    num_timesteps: int,
    latent_shape: tuple[int, ...],
) -> TrainingBatch:
    """Sample ``config.batch_size`` records with replacement from one subject's training images.

    Draw order (fixed for reproducibility): pool kinds, image indices, one
    template index per record, timesteps, then the Gaussian noise block.
    """
    subject = get_subject(manifest, subject_id)
    _require_masks(subject)
    n = config.batch_size
    mix = torch.tensor(config.pool_mix, dtype=torch.float64)
    kinds = torch.multinomial(mix, n, replacement=True, generator=rng).tolist()
    images = torch.randint(len(subject.train), (n,), generator=rng).tolist()
    templates = []
    for kind in kinds:
        pool = pools.pool(POOL_ORDER[kind])
        templates.append(pool[int(torch.randint(len(pool), (1,), generator=rng))])
    steps = torch.randint(num_timesteps, (n,), generator=rng).tolist()
    noise = torch.randn((n, *latent_shape), generator=rng, dtype=torch.float64)

    records = tuple(
        BatchRecord(
            image_id=subject.train[i].image_id,
            image_index=i,
            pool=POOL_ORDER[k],
            prompt=prompt,
            t=t,
        )
        for k, i, prompt, t in zip(kinds, images, templates, steps, strict=True)
    )
    return TrainingBatch(subject_id=subject_id, records=records, noise=noise)


# ─── State ───

def init_trainer_state(
    config: TrainingConfig,
    manifest: DatasetManifest,
    subject_id: str,
    backend: DiffusionBackend,
) -> TrainerState:
    subject = get_subject(manifest, subject_id)
    table = register_tokens(subject, backend.text_encoder, init=config.init,
                            seed=derive_seed(config.seed, "tokens", subject_id))
    table.requires_grad_(True)
    neti = None
    if config.method == Method.NETI:
        neti = NeTIEmbedder(table.dim, backend.schedule.T, backend.model.layer_count,
                            hidden_dim=config.neti_hidden_dim).to(torch.float64)
        gen = torch_generator(derive_seed(config.seed, "neti", subject_id))
        neti.reset_parameters(gen)
        neti.init_output(table.subject.detach(), generator=gen)
    params = table.parameters() + (list(neti.parameters()) if neti is not None else [])
    return TrainerState(
        config=config,
        subject_id=subject_id,
        layer_count=backend.model.layer_count,
        table=table,
        neti=neti,
        optimizer=make_optimizer(params, config),
        rng=torch_generator(derive_seed(config.seed, "batches", subject_id)),
    )


# ─── Step ───

def _conditioning(state: TrainerState, record: BatchRecord, backend: DiffusionBackend) -> ConditioningBundle:
    return embed_prompt(
        record.prompt,
        state.table,
        backend.text_encoder,
        method=state.config.method,
        t=record.t,
        image_id=record.image_id,
        neti=state.neti,
    )


def _contrastive(state: TrainerState, bundles: list[ConditioningBundle]) -> torch.Tensor:
    """InfoNCE over in-batch contextual embeddings.

    Positives: every pair of distinct records' v* vectors. Negatives: every
    (v*, A*) pair across the batch. NeTI bundles contribute layer 0.
    """
    subjects = [extract_contextual(b, SUBJECT_TOKEN, 0) for b in bundles if SUBJECT_TOKEN in b.token_positions]
    attractors = [extract_contextual(b, ATTRACTOR_TOKEN, 0) for b in bundles if ATTRACTOR_TOKEN in b.token_positions]
    positives = [(subjects[i], subjects[j]) for i in range(len(subjects)) for j in range(i + 1, len(subjects))]
    if not positives:
        if state.config.weights.w_c_max > 0:
            logger.warning("Step %d: fewer than two <v*> prompts in batch, InfoNCE set to 0", state.step)
        return torch.zeros((), dtype=torch.float64)
    negatives = [(s, a) for s in subjects for a in attractors]
    return info_nce(positives, negatives, state.config.weights.tau)


def train_step(
    state: TrainerState,
    batch: TrainingBatch,
    backend: DiffusionBackend,
    images: SubjectImages,
) -> tuple[TrainerState, LossBreakdown]:
    config = state.config
    if batch.subject_id != state.subject_id or images.subject_id != state.subject_id:
        raise DataError(f"batch subject {batch.subject_id} does not match trainer subject {state.subject_id}")

    index = torch.tensor([r.image_index for r in batch.records])
    t = torch.tensor([r.t for r in batch.records])
    z_t = add_noise(images.latents[index], batch.noise, t, backend.schedule)
    bundles = [_conditioning(state, r, backend) for r in batch.records]
    eps_hat = predict_eps(backend.model, z_t, t, bundles)

    zero = torch.zeros((), dtype=torch.float64)
    components = {PoolKind.SUBJECT: zero, PoolKind.BACKGROUND: zero, PoolKind.JOINT: zero}
    for kind in POOL_ORDER:
        sel = [i for i, r in enumerate(batch.records) if r.pool == kind]
        if not sel:
            continue
        rows = torch.tensor(sel)
        eps, pred = batch.noise[rows], eps_hat[rows]
        if kind == PoolKind.JOINT:
            components[kind] = joint_loss(eps, pred)
            continue
        if not config.use_masks:
            mask = torch.ones(eps.shape[0], *eps.shape[-2:], dtype=eps.dtype)
        elif kind == PoolKind.SUBJECT:
            mask = images.subject_masks[index[rows]]
        else:
            mask = images.background_masks[index[rows]]
        components[kind] = masked_mse(eps, pred, mask).value

    l_infonce = _contrastive(state, bundles)
    breakdown = total_loss(
        components[PoolKind.SUBJECT],
        components[PoolKind.BACKGROUND],
        components[PoolKind.JOINT],
        l_infonce,
        config.weights,
        state.step,
        config.contrastive_schedule,
    )

    state.optimizer.zero_grad(set_to_none=True)
    if breakdown.total.requires_grad:
        breakdown.total.backward()
        state.optimizer.step()
    state.step += 1
    return state, breakdown


# ─── Loop ───

def _truncate_trace(path: Path, keep_through: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= keep_through]
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def train(
    config: TrainingConfig,
    manifest: DatasetManifest,
    subject_id: str,
    backend: DiffusionBackend,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> list[Path]:
    """Run ``config.total_steps`` steps; returns the checkpoints written, final.ckpt last."""
    enable_determinism()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subject = get_subject(manifest, subject_id)
    images = load_subject_images(manifest, subject_id, backend, config.mask_threshold)
    pools = build_prompt_pools(subject.supercategory)

    trace_path = out / TRACE_FILE
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.subject_id != subject_id or state.config != config:
            raise DataError(f"checkpoint {resume_from} was written for a different subject or config")
        _truncate_trace(trace_path, state.step)
        logger.info("Resuming %s from step %d", subject_id, state.step)
    else:
        state = init_trainer_state(config, manifest, subject_id, backend)
        trace_path.write_text("", encoding="utf-8")

    written: list[Path] = []
    with trace_path.open("a", encoding="utf-8") as trace:
        while state.step < config.total_steps:
            batch = assemble_batch(manifest, subject_id, pools, config, state.rng,
                                   num_timesteps=backend.schedule.T, latent_shape=backend.latent_shape)
            state, breakdown = train_step(state, batch, backend, images)
            record = loss_trace_record(state.step, breakdown)
            trace.write(json.dumps(record, sort_keys=True) + "\n")
            logger.debug("Step %d: total=%.6f l_joint=%.6f", state.step, record["total"], record["l_joint"])
            if state.step % config.checkpoint_interval == 0:
                trace.flush()
                written.append(save_checkpoint(state, out / f"step-{state.step:06d}.ckpt"))
                logger.info("Checkpoint at step %d/%d: total=%.6f", state.step, config.total_steps, record["total"])

    written.append(save_checkpoint(state, out / FINAL_CHECKPOINT))
    logger.info("Training %s (%s) finished after %d steps", subject_id, config.method, state.step)
    return written
