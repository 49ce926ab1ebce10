"""Backbone pretraining on a captioned corpus.

The toy denoiser starts random, so before any personalization it is trained
as an ordinary text-to-image model: every image (and, when present, its
subject-only and background-only layers) is paired with a caption naming its
content, and the text encoder stays frozen throughout. Use a corpus
synthesised with a different seed than the personalization data.
"""
import logging
from pathlib import Path

import torch
from torch.nn import functional as F

from app.core.determinism import derive_seed, torch_generator
from app.core.errors import NonFiniteError, SpecError
from app.diffusion.backend import DiffusionBackend
from app.diffusion.codec import load_rgb
from app.diffusion.predictor import predict_eps
from app.diffusion.schedule import add_noise
from app.embedders.conditioning import ConditioningBundle, plain_bundle
from app.schemas.dataset import DatasetManifest, ImageRecord
from app.services.manifest import fill_caption

logger = logging.getLogger(__name__)

UNCONDITIONAL_RATE = 0.1


def _record_phrase(record: ImageRecord, supercategory: str) -> str:
    phrase = record.meta.get("subject_phrase")
    return phrase if isinstance(phrase, str) and phrase else supercategory


def _background_phrase(record: ImageRecord) -> str:
    kind = record.meta.get("background", "")
    colors = record.meta.get("background_colors") or []
    color = colors[0] if colors else ""
    return " ".join(w for w in (kind, color) if w)


def build_pretraining_pairs(manifest: DatasetManifest) -> list[tuple[str, str]]:
    """(image path, prompt) pairs covering every image and layer in the manifest."""
    pairs: list[tuple[str, str]] = []
    for subject in manifest.subjects:
        for record in [*subject.train, *subject.test]:
            phrase = _record_phrase(record, subject.supercategory)
            background = _background_phrase(record)
            captions = record.captions or [f"a photo of a {{}} on a {background} background."]
            for caption in captions:
                pairs.append((str(manifest.resolve(record.image)), fill_caption(caption, f"a {phrase}")))
            if record.subject_layer:
                pairs.append((str(manifest.resolve(record.subject_layer)), f"a photo of a {phrase}."))
            if record.background_layer:
                pairs.append((str(manifest.resolve(record.background_layer)), f"a photo of a {background} background."))
    return pairs


def pretrain_backbone(
    backend: DiffusionBackend,
    manifest: DatasetManifest,
    steps: int,
    learning_rate: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Train the denoiser in place; returns the per-step loss trace."""
    if steps < 0 or batch_size < 1 or learning_rate <= 0:
        raise SpecError("pretraining needs steps >= 0, batch_size >= 1 and learning_rate > 0")
    pairs = build_pretraining_pairs(manifest)
    if not pairs:
        raise SpecError("pretraining corpus is empty")

    latents = torch.stack([backend.encode_image(load_rgb(Path(path))) for path, _ in pairs])
    prompts = sorted({prompt for _, prompt in pairs} | {""})
    contexts: dict[str, ConditioningBundle] = {p: plain_bundle(p, backend.text_encoder) for p in prompts}
    logger.info("Pretraining backbone on %d pairs (%d distinct prompts) for %d steps", len(pairs), len(prompts), steps)

    model = backend.model
    model.requires_grad_(True)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=0.0, foreach=False)
    gen = torch_generator(derive_seed(seed, "pretrain"))
    T = backend.schedule.T
    trace: list[float] = []
    try:
        for step in range(steps):
            idx = torch.randint(len(pairs), (batch_size,), generator=gen)
            t = torch.randint(T, (batch_size,), generator=gen)
            drop = torch.rand(batch_size, generator=gen, dtype=torch.float64) < UNCONDITIONAL_RATE
            z0 = latents[idx]
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            z_t = add_noise(z0, eps, t, backend.schedule)
            bundles = [contexts["" if bool(d) else pairs[int(i)][1]] for i, d in zip(idx, drop, strict=True)]
            loss = F.mse_loss(predict_eps(model, z_t, t, bundles), eps)
            if not torch.isfinite(loss):
                raise NonFiniteError("pretrain_mse", float(loss))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            trace.append(float(loss))
            if (step + 1) % 100 == 0:
                logger.info("Pretrain step %d/%d: loss=%.5f", step + 1, steps, trace[-1])
    finally:
        backend.freeze()
    return trace
