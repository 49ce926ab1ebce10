"""Separate-test-set evaluation.

Generation fills each caption's ``{}`` with ``<v*>``; scoring fills it with
the supercategory word for the text-image score and compares each generated
image with the reference image the caption was written for. The train split
runs the same code path with training templates as captions and training
images as references, which is what the overfit curve contrasts.
"""
import logging
import math
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.core.config import settings
from app.core.determinism import derive_seed
from app.core.errors import ConditioningError, DataError, MissingOutputError, SpecError
from app.diffusion.backend import DiffusionBackend
from app.diffusion.codec import load_rgb
from app.diffusion.sampler import sample
from app.embedders.conditioning import ConditioningBundle, embed_prompt, plain_bundle
from app.embedders.tokenizer import ATTRACTOR_TOKEN, SUBJECT_TOKEN
from app.embedders.tokens import LearnedTokens, Method, load_learned_tokens
from app.schemas.dataset import DatasetManifest
from app.schemas.evaluation import (
    METRICS,
    SPLIT_ORDER,
    CurveReport,
    CurveRow,
    DisentanglementReport,
    EvaluationPlan,
    EvaluationReport,
    EvaluationTask,
    ImageScore,
    MetricMeans,
    ProbeScore,
    Split,
    SubjectScores,
)
from app.services.checkpoints import checkpoint_step
from app.services.embedding_models import EmbeddingModel, EmbeddingSuite, cosine
from app.services.manifest import fill_caption
from app.services.prompts import PROBE_TEMPLATE, SINGLE_SLOT_TEMPLATES

logger = logging.getLogger(__name__)

TaskKey = tuple[str, str, int, int]


# ─── Plan ───

def train_split_templates(count: int = settings.TRAIN_SPLIT_TEMPLATES) -> tuple[str, ...]:
    return SINGLE_SLOT_TEMPLATES[:count]


def build_plan(
    manifest: DatasetManifest,
    split: Split,
    images_per_prompt: int = settings.IMAGES_PER_PROMPT,
    seed: int = 0,
    subject_ids: Sequence[str] | None = None,
) -> EvaluationPlan:
    """One task per (subject, reference image, caption, sample), each with its own derived seed."""
    if images_per_prompt < 1:
        raise SpecError(f"images_per_prompt must be >= 1, got {images_per_prompt}")
    if split not in SPLIT_ORDER:
        raise SpecError(f"unknown split {split!r}")
    wanted = set(subject_ids) if subject_ids is not None else None
    tasks: list[EvaluationTask] = []
    for subject in manifest.subjects:
        if wanted is not None and subject.id not in wanted:
            continue
        if split == "test":
            sources = [(record.image_id, record.captions) for record in subject.test]
        else:
            templates = list(train_split_templates())
            sources = [(record.image_id, templates) for record in subject.train]
        for image_id, captions in sources:
            for c, caption in enumerate(captions):
                for k in range(images_per_prompt):
                    tasks.append(EvaluationTask(
                        subject_id=subject.id,
                        image_id=image_id,
                        caption_index=c,
                        caption=caption,
                        sample_index=k,
                        seed=derive_seed(seed, split, subject.id, image_id, c, k),
                        split=split,
                    ))
    if wanted is not None and not tasks:
        raise SpecError(f"no {split} tasks for subjects {sorted(wanted)}")
    if not tasks:
        raise SpecError(f"manifest has no {split}-split prompts to evaluate")
    logger.info("Built %s plan: %d tasks over %d subjects", split, len(tasks), len({t.subject_id for t in tasks}))
    return EvaluationPlan(split=split, images_per_prompt=images_per_prompt, seed=seed, tasks=tasks)


# ─── Generation ───

class PromptRenderer:
    """Samples images for pseudo-token prompts from one set of learned tokens."""

    def __init__(
        self,
        tokens: LearnedTokens,
        backend: DiffusionBackend,
        sampler_steps: int = settings.SAMPLER_STEPS,
        guidance_scale: float = settings.GUIDANCE_SCALE,
    ) -> None:
        if tokens.embedding_dim != backend.text_encoder.embedding_dim:
            raise ConditioningError(
                f"tokens have dimension {tokens.embedding_dim}, backend expects {backend.text_encoder.embedding_dim}"
            )
        if tokens.method == Method.NETI and (tokens.neti is None or tokens.layer_count != backend.model.layer_count):
            raise ConditioningError("NeTI tokens do not match the backend's layer count")
        self.tokens = tokens
        self.backend = backend
        self.sampler_steps = sampler_steps
        self.guidance_scale = guidance_scale
        self._unconditional = plain_bundle("", backend.text_encoder)
        self._cache: dict[tuple[str, str | None, int], ConditioningBundle] = {}

    def _bundle(self, prompt: str, image_id: str | None, t: int) -> ConditioningBundle:
        neti_path = self.tokens.method == Method.NETI and SUBJECT_TOKEN in prompt
        key = (prompt, image_id, t if neti_path else -1)
        bundle = self._cache.get(key)
        if bundle is None:
            bundle = embed_prompt(prompt, self.tokens.table, self.backend.text_encoder,
                                  method=self.tokens.method, t=t, image_id=image_id, neti=self.tokens.neti)
            self._cache[key] = bundle
        return bundle

    def render(self, prompt: str, seed: int, image_id: str | None = None) -> np.ndarray:
        provider: Callable[[int], ConditioningBundle] = lambda t: self._bundle(prompt, image_id, t)  # noqa: E731
        z = sample(
            self.backend.model,
            provider,
            self.backend.schedule,
            seed,
            self.sampler_steps,
            shape=self.backend.latent_shape,
            guidance_scale=self.guidance_scale,
            unconditional=self._unconditional,
        )
        return self.backend.decode_latent(z)


@dataclass
class GeneratedSet:
    checkpoint_id: str
    images: dict[TaskKey, np.ndarray] = field(default_factory=dict)


def run_generation(
    plan: EvaluationPlan,
    tokens: LearnedTokens,
    backend: DiffusionBackend,
    *,
    checkpoint_id: str = "",
    sampler_steps: int = settings.SAMPLER_STEPS,
    guidance_scale: float = settings.GUIDANCE_SCALE,
) -> GeneratedSet:
    """Render every task whose subject matches the tokens' subject."""
    renderer = PromptRenderer(tokens, backend, sampler_steps, guidance_scale)
    generated = GeneratedSet(checkpoint_id=checkpoint_id or tokens.subject_id)
    for task in plan.tasks:
        if task.subject_id != tokens.subject_id:
            continue
        prompt = fill_caption(task.caption, SUBJECT_TOKEN)
        generated.images[task.key] = renderer.render(prompt, task.seed)
    logger.info("Generated %d images for %s (%s split)", len(generated.images), tokens.subject_id, plan.split)
    return generated


# ─── Scoring ───

def fsum_mean(values: list[float]) -> float:
    """Mean with exact summation; 0.0 for an empty list."""
    return math.fsum(values) / len(values) if values else 0.0


def _means(scores: list[ImageScore]) -> MetricMeans:
    return MetricMeans(**{m: fsum_mean([getattr(s, m) for s in scores]) for m in METRICS})


def score(
    generated: GeneratedSet,
    plan: EvaluationPlan,
    manifest: DatasetManifest,
    embed_models: EmbeddingSuite,
    subject_ids: Sequence[str] | None = None,
) -> EvaluationReport:
    """Score every planned task for ``subject_ids`` (default: all subjects in the plan)."""
    wanted = set(subject_ids) if subject_ids is not None else {t.subject_id for t in plan.tasks}
    tasks = sorted((t for t in plan.tasks if t.subject_id in wanted), key=lambda t: t.key)
    missing = [t.key for t in tasks if t.key not in generated.images]
    if missing:
        raise MissingOutputError(f"{len(missing)} planned task(s) have no generated image, first: {missing[0]}")

    supercategory = {s.id: s.supercategory for s in manifest.subjects}
    references: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    scores: list[ImageScore] = []
    for task in tasks:
        if task.image_id not in references:
            ref = load_rgb(manifest.resolve(task.image_id))
            references[task.image_id] = (embed_models.text_image.embed_image(ref), embed_models.image.embed_image(ref))
        ref_contrastive, ref_selfsup = references[task.image_id]
        image = generated.images[task.key]
        gen_contrastive = embed_models.text_image.embed_image(image)
        text = embed_models.text_image.embed_text(fill_caption(task.caption, supercategory[task.subject_id]))
        scores.append(ImageScore(
            subject_id=task.subject_id,
            image_id=task.image_id,
            caption_index=task.caption_index,
            sample_index=task.sample_index,
            seed=task.seed,
            text_image_sim=cosine(text, gen_contrastive),
            image_image_sim_contrastive=cosine(gen_contrastive, ref_contrastive),
            image_image_sim_selfsup=cosine(embed_models.image.embed_image(image), ref_selfsup),
        ))

    by_subject: dict[str, list[ImageScore]] = defaultdict(list)
    for s in scores:
        by_subject[s.subject_id].append(s)
    return EvaluationReport(
        split=plan.split,
        checkpoint_id=generated.checkpoint_id,
        n_images=len(scores),
        aggregate=_means(scores),
        subjects=[SubjectScores(subject_id=sid, n_images=len(rows), means=_means(rows))
                  for sid, rows in sorted(by_subject.items())],
        scores=scores,
    )


def evaluate_checkpoint(
    tokens: LearnedTokens,
    manifest: DatasetManifest,
    backend: DiffusionBackend,
    embed_models: EmbeddingSuite,
    *,
    split: Split = "test",
    images_per_prompt: int = settings.IMAGES_PER_PROMPT,
    seed: int = 0,
    checkpoint_id: str = "",
    sampler_steps: int = settings.SAMPLER_STEPS,
    guidance_scale: float = settings.GUIDANCE_SCALE,
) -> EvaluationReport:
    """build_plan + run_generation + score for the tokens' subject."""
    plan = build_plan(manifest, split, images_per_prompt, seed, subject_ids=[tokens.subject_id])
    generated = run_generation(plan, tokens, backend, checkpoint_id=checkpoint_id,
                               sampler_steps=sampler_steps, guidance_scale=guidance_scale)
    return score(generated, plan, manifest, embed_models, subject_ids=[tokens.subject_id])


# ─── Overfit curve ───

def overfit_curve(
    checkpoints: Sequence[str | Path],
    manifest: DatasetManifest,
    backend: DiffusionBackend,
    embed_models: EmbeddingSuite,
    *,
    images_per_prompt: int = settings.IMAGES_PER_PROMPT,
    seed: int = 0,
    sampler_steps: int = settings.SAMPLER_STEPS,
    guidance_scale: float = settings.GUIDANCE_SCALE,
) -> CurveReport:
    """Train- and test-split metrics for each checkpoint, ordered by step."""
    if len(checkpoints) < 2:
        raise SpecError(f"an overfit curve needs at least 2 checkpoints, got {len(checkpoints)}")
    rows: list[CurveRow] = []
    for path in checkpoints:
        path = Path(path)
        tokens = load_learned_tokens(path)
        step = checkpoint_step(path)
        for split in SPLIT_ORDER:
            report = evaluate_checkpoint(tokens, manifest, backend, embed_models, split=split,
                                         images_per_prompt=images_per_prompt, seed=seed, checkpoint_id=path.name,
                                         sampler_steps=sampler_steps, guidance_scale=guidance_scale)
            rows.append(CurveRow(step=step, split=split, checkpoint_id=path.name,
                                 **report.aggregate.model_dump()))
        logger.info("Curve point %s (step %d) scored", path.name, step)
    rows.sort(key=lambda r: (r.step, SPLIT_ORDER.index(r.split)))
    return CurveReport(rows=rows)


# ─── Attractor probe ───

def probe_disentanglement(
    tokens: LearnedTokens,
    manifest: DatasetManifest,
    backend: DiffusionBackend,
    embed_model: EmbeddingModel,
    seeds: Sequence[int] = (0, 1),
    *,
    checkpoint_id: str = "",
    sampler_steps: int = settings.SAMPLER_STEPS,
    guidance_scale: float = settings.GUIDANCE_SCALE,
) -> DisentanglementReport:
    """Render "a photo of <v*>." and "a photo of <A*>." and compare with each training image's layers."""
    try:
        subject = manifest.subject(tokens.subject_id)
    except KeyError:
        raise DataError(f"subject {tokens.subject_id!r} is not in the manifest") from None
    records = [r for r in subject.train if r.subject_layer and r.background_layer]
    if not records:
        raise DataError(f"subject {subject.id} has no subject/background layer renderings to probe against")

    renderer = PromptRenderer(tokens, backend, sampler_steps, guidance_scale)
    subject_prompt = PROBE_TEMPLATE.format(SUBJECT_TOKEN)
    attractor_prompt = PROBE_TEMPLATE.format(ATTRACTOR_TOKEN)
    scores: list[ProbeScore] = []
    for record in records:
        subject_layer = embed_model.embed_image(load_rgb(manifest.resolve(record.subject_layer)))  # type: ignore[arg-type]
        background_layer = embed_model.embed_image(load_rgb(manifest.resolve(record.background_layer)))  # type: ignore[arg-type]
        for seed in seeds:
            probe_seed = derive_seed(seed, "probe", subject.id, record.image_id)
            v_img = embed_model.embed_image(renderer.render(subject_prompt, probe_seed))
            a_img = embed_model.embed_image(renderer.render(attractor_prompt, probe_seed, image_id=record.image_id))
            scores.append(ProbeScore(
                image_id=record.image_id,
                seed=seed,
                subject_token_vs_subject_layer=cosine(v_img, subject_layer),
                subject_token_vs_background_layer=cosine(v_img, background_layer),
                attractor_vs_subject_layer=cosine(a_img, subject_layer),
                attractor_vs_background_layer=cosine(a_img, background_layer),
            ))
    fields = ("subject_token_vs_subject_layer", "subject_token_vs_background_layer",
              "attractor_vs_subject_layer", "attractor_vs_background_layer")
    report = DisentanglementReport(
        subject_id=subject.id,
        checkpoint_id=checkpoint_id,
        scores=scores,
        **{f: fsum_mean([getattr(s, f) for s in scores]) for f in fields},
    )
    logger.info("Probe %s: subject margin %.4f, background margin %.4f",
                subject.id, report.subject_margin, report.background_margin)
    return report
