"""Contrastive-weighting ablation: train and evaluate once per schedule kind."""
import json
import logging
from collections.abc import Sequence
from pathlib import Path

from app.core.errors import SpecError
from app.diffusion.backend import DiffusionBackend
from app.embedders.tokens import load_learned_tokens
from app.schemas.dataset import DatasetManifest
from app.schemas.evaluation import METRICS, AblationReport, AblationRow, ImageScore
from app.schemas.training import SCHEDULE_KINDS, TrainingConfig, WeightSchedule
from app.services.embedding_models import EmbeddingSuite
from app.services.evaluation import evaluate_checkpoint, fsum_mean
from app.services.trainer import FINAL_CHECKPOINT, TRACE_FILE, train

logger = logging.getLogger(__name__)


def _final_total(trace_path: Path) -> float:
    lines = [line for line in trace_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return float(json.loads(lines[-1])["total"]) if lines else 0.0


def run_ablation(
    kinds: Sequence[str],
    base_config: TrainingConfig,
    manifest: DatasetManifest,
    subject_ids: Sequence[str],
    backend: DiffusionBackend,
    embed_models: EmbeddingSuite,
    out_dir: Path,
    *,
    images_per_prompt: int,
    sampler_steps: int,
    guidance_scale: float,
    seed: int = 0,
) -> AblationReport:
    """One row per schedule kind; metrics average every test-split image over all subjects."""
    unknown = [k for k in kinds if k not in SCHEDULE_KINDS]
    if unknown or not kinds:
        raise SpecError(f"ablation kinds must be a non-empty subset of {SCHEDULE_KINDS}, got {list(kinds)}")
    if not subject_ids:
        raise SpecError("ablation needs at least one subject")

    rows: list[AblationRow] = []
    for kind in kinds:
        schedule = WeightSchedule(kind=kind, total_steps=base_config.total_steps,  # type: ignore[arg-type]
                                  k=base_config.contrastive_schedule.k)
        config = base_config.model_copy(update={"schedule": schedule})
        scores: list[ImageScore] = []
        finals: list[float] = []
        for subject_id in subject_ids:
            run_dir = out_dir / kind / subject_id
            train(config, manifest, subject_id, backend, run_dir)
            finals.append(_final_total(run_dir / TRACE_FILE))
            tokens = load_learned_tokens(run_dir / FINAL_CHECKPOINT)
            report = evaluate_checkpoint(tokens, manifest, backend, embed_models, split="test",
                                         images_per_prompt=images_per_prompt, seed=seed,
                                         checkpoint_id=f"{kind}/{subject_id}",
                                         sampler_steps=sampler_steps, guidance_scale=guidance_scale)
            scores.extend(report.scores)
        rows.append(AblationRow(
            kind=kind,
            n_images=len(scores),
            final_total_loss=fsum_mean(finals),
            **{m: fsum_mean([getattr(s, m) for s in scores]) for m in METRICS},
        ))
        logger.info("Ablation %s: %s", kind, ", ".join(f"{m}={getattr(rows[-1], m):.4f}" for m in METRICS))
    return AblationReport(steps=base_config.total_steps, rows=rows)
