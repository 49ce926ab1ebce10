"""Command-line entry point.

  personalize validate-data   --manifest m [--profile toy|full]
  personalize synth-data      --out dir [--subjects N --images-per-subject N --image-size N]
  personalize pretrain        --manifest m --steps N --out dir
  personalize train           --manifest m --subject s --method ti|neti|ti+|neti+ ...
  personalize generate        --manifest m --checkpoint c [--split test]
  personalize evaluate        --manifest m --checkpoint c [--split test]
  personalize curve           --manifest m --checkpoints c1 c2 ...
  personalize ablate-schedule --manifest m [--kinds zero,cosine]
  personalize probe           --manifest m --checkpoint c

Every command takes --seed and --out; without --out artifacts go under
PERSONALIZE_CACHE_DIR/<command>. Exit status: 0 ok, 2 usage, 3 data,
4 numerical, 1 anything else.
"""
import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import sentry_sdk

from app.core.config import settings
from app.core.errors import PersonalizeError, UsageError
from app.core.logging import setup_logging
from app.diffusion.backend import DiffusionBackend, build_toy_backend, load_backend, save_backend
from app.diffusion.codec import load_rgb
from app.diffusion.pretrain import pretrain_backbone
from app.embedders.tokenizer import build_vocabulary
from app.embedders.tokens import export_learned_tokens, load_learned_tokens
from app.schemas.backend import BackboneSpec
from app.schemas.dataset import DatasetManifest, ToyDatasetSpec
from app.schemas.training import SCHEDULE_KINDS, LossWeights, TrainingConfig, WeightSchedule
from app.services.ablation import run_ablation
from app.services.embedding_models import default_suite
from app.services.evaluation import build_plan, evaluate_checkpoint, overfit_curve, probe_disentanglement, run_generation
from app.services.manifest import load_manifest, validate_manifest
from app.services.reporting import save_generated, write_ablation, write_curve, write_probe, write_report
from app.services.toy_data import synth_toy_dataset
from app.services.trainer import FINAL_CHECKPOINT, load_training_config, train

logger = logging.getLogger(__name__)

METHOD_TAGS = ("ti", "neti", "ti+", "neti+")


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts_written: list[Path] = field(default_factory=list)
    summary: list[str] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# ─── Flag parsing helpers ───

def _floats(text: str, count: int, flag: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects {count} comma-separated numbers, got {text!r}") from None
    if len(values) != count:
        raise UsageError(f"{flag} expects {count} comma-separated numbers, got {text!r}")
    return values


def _names(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else settings.cache_dir / args.command


def _manifest(args: argparse.Namespace) -> DatasetManifest:
    if not args.manifest:
        raise UsageError(f"{args.command} needs --manifest")
    return load_manifest(args.manifest)


def _image_size(manifest: DatasetManifest) -> int:
    for subject in manifest.subjects:
        for record in subject.train + subject.test:
            return int(load_rgb(manifest.resolve(record.image)).shape[0])
    raise UsageError("manifest has no images to size the backbone from")


def _backend(args: argparse.Namespace, manifest: DatasetManifest) -> DiffusionBackend:
    if args.backbone:
        return load_backend(args.backbone)
    spec = BackboneSpec(image_size=_image_size(manifest))
    return build_toy_backend(spec, build_vocabulary(manifest), seed=args.seed)


def _training_config(args: argparse.Namespace) -> TrainingConfig:
    overrides: dict[str, Any] = {"seed": args.seed}
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.pool_mix:
        overrides["pool_mix"] = _floats(args.pool_mix, 3, "--pool-mix")
    if args.checkpoint_interval is not None:
        overrides["checkpoint_interval"] = args.checkpoint_interval
    if args.no_masks:
        overrides["use_masks"] = False
    if args.init:
        overrides["init"] = args.init

    if args.config:
        if args.method:
            raise UsageError("--method cannot be combined with --config")
        base = load_training_config(args.config)
        steps = base.total_steps if args.steps is None else args.steps
        weights = base.weights
        schedule_kind, schedule_k = base.contrastive_schedule.kind, base.contrastive_schedule.k
    else:
        base = None
        steps = 500 if args.steps is None else args.steps
        weights = LossWeights()
        schedule_kind, schedule_k = "cosine", None

    try:
        if args.weights:
            w_s, w_b, w_i, w_c_max = _floats(args.weights, 4, "--weights")
            weights = weights.model_copy(update={"w_s": w_s, "w_b": w_b, "w_i": w_i, "w_c_max": w_c_max})
        if args.tau is not None:
            weights = weights.model_copy(update={"tau": args.tau})
        overrides["weights"] = LossWeights.model_validate(weights.model_dump())
        overrides["total_steps"] = steps
        overrides["schedule"] = WeightSchedule(kind=args.schedule or schedule_kind, total_steps=steps, k=schedule_k)
        if base is not None:
            return TrainingConfig.model_validate({**base.model_dump(), **overrides})
        return TrainingConfig.for_method(args.method or "ti+", **overrides)
    except ValueError as exc:
        raise UsageError(f"invalid training flags: {exc}") from exc


# ─── Commands ───

def _cmd_validate_data(args: argparse.Namespace) -> CommandResult:
    report = validate_manifest(_manifest(args), args.profile)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "validation.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    summary = [f"{report.subjects} subjects, {report.train_images} train / {report.test_images} test images, "
               f"{report.captions} captions ({args.profile} profile)"]
    summary += [f"[{v.code}] {v.message}" for v in report.violations]
    summary.append("valid" if report.is_valid else f"{len(report.violations)} violation(s)")
    return CommandResult(exit_code=0 if report.is_valid else 3, artifacts_written=[path], summary=summary)


def _cmd_synth_data(args: argparse.Namespace) -> CommandResult:
    spec = ToyDatasetSpec(n_subjects=args.subjects, images_per_subject=args.images_per_subject,
                          image_size=args.image_size, seed=args.seed, captions_per_image=args.captions_per_image)
    out = _out_dir(args)
    manifest = synth_toy_dataset(spec, out)
    return CommandResult(artifacts_written=[out / "manifest.json"],
                         summary=[f"{len(manifest.subjects)} subjects written to {out}"])


def _cmd_pretrain(args: argparse.Namespace) -> CommandResult:
    manifest = _manifest(args)
    backend = _backend(args, manifest)
    trace = pretrain_backbone(backend, manifest, steps=1000 if args.steps is None else args.steps,
                              learning_rate=args.lr if args.lr is not None else 1e-3,
                              batch_size=settings.BATCH_SIZE if args.batch is None else args.batch, seed=args.seed)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "pretrain_trace.json"
    trace_path.write_text(json.dumps(trace) + "\n", encoding="utf-8")
    backend_path = save_backend(backend, out / "backend.ckpt")
    final = f"{trace[-1]:.5f}" if trace else "n/a"
    return CommandResult(artifacts_written=[backend_path, trace_path],
                         summary=[f"pretrained {len(trace)} steps, final loss {final}"])


def _cmd_train(args: argparse.Namespace) -> CommandResult:
    if not args.subject:
        raise UsageError("train needs --subject")
    manifest = _manifest(args)
    config = _training_config(args)
    backend = _backend(args, manifest)
    out = _out_dir(args)
    written = train(config, manifest, args.subject, backend, out, resume_from=args.checkpoint)
    written.append(export_learned_tokens(load_learned_tokens(out / FINAL_CHECKPOINT), out / "learned_tokens.ckpt"))
    return CommandResult(artifacts_written=written,
                         summary=[f"trained {args.subject} ({config.method}) for {config.total_steps} steps",
                                  f"final checkpoint: {out / FINAL_CHECKPOINT}"])


def _require_checkpoint(args: argparse.Namespace) -> Path:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    return Path(args.checkpoint)


def _cmd_generate(args: argparse.Namespace) -> CommandResult:
    manifest = _manifest(args)
    tokens = load_learned_tokens(_require_checkpoint(args))
    backend = _backend(args, manifest)
    plan = build_plan(manifest, args.split, args.images_per_prompt, args.seed, subject_ids=[tokens.subject_id])
    generated = run_generation(plan, tokens, backend, checkpoint_id=Path(args.checkpoint).name,
                               sampler_steps=args.sampler_steps, guidance_scale=args.guidance_scale)
    written = save_generated(generated.images, _out_dir(args))
    return CommandResult(artifacts_written=written, summary=[f"generated {len(written)} images ({args.split} split)"])


def _cmd_evaluate(args: argparse.Namespace) -> CommandResult:
    manifest = _manifest(args)
    checkpoint = _require_checkpoint(args)
    tokens = load_learned_tokens(checkpoint)
    report = evaluate_checkpoint(tokens, manifest, _backend(args, manifest), default_suite(), split=args.split,
                                 images_per_prompt=args.images_per_prompt, seed=args.seed,
                                 checkpoint_id=checkpoint.name, sampler_steps=args.sampler_steps,
                                 guidance_scale=args.guidance_scale)
    written = write_report(report, _out_dir(args))
    means = report.aggregate
    return CommandResult(artifacts_written=written, summary=[
        f"{report.n_images} images scored on the {report.split} split",
        f"text_image_sim={means.text_image_sim:.4f} image_image_sim_contrastive={means.image_image_sim_contrastive:.4f} "
        f"image_image_sim_selfsup={means.image_image_sim_selfsup:.4f}",
    ])


def _cmd_curve(args: argparse.Namespace) -> CommandResult:
    if not args.checkpoints:
        raise UsageError("curve needs --checkpoints")
    manifest = _manifest(args)
    curve = overfit_curve(args.checkpoints, manifest, _backend(args, manifest), default_suite(),
                          images_per_prompt=args.images_per_prompt, seed=args.seed,
                          sampler_steps=args.sampler_steps, guidance_scale=args.guidance_scale)
    written = write_curve(curve, _out_dir(args))
    return CommandResult(artifacts_written=written, summary=[f"{len(curve.rows)} curve rows"])


def _cmd_ablate_schedule(args: argparse.Namespace) -> CommandResult:
    manifest = _manifest(args)
    kinds = _names(args.kinds) if args.kinds else list(SCHEDULE_KINDS)
    subjects = _names(args.subject) if args.subject else [s.id for s in manifest.subjects]
    out = _out_dir(args)
    report = run_ablation(kinds, _training_config(args), manifest, subjects, _backend(args, manifest),
                          default_suite(), out, images_per_prompt=args.images_per_prompt,
                          sampler_steps=args.sampler_steps, guidance_scale=args.guidance_scale, seed=args.seed)
    written = write_ablation(report, out)
    return CommandResult(artifacts_written=written,
                         summary=[f"{len(report.rows)} schedule kinds compared over {len(subjects)} subject(s)"])


def _cmd_probe(args: argparse.Namespace) -> CommandResult:
    manifest = _manifest(args)
    checkpoint = _require_checkpoint(args)
    tokens = load_learned_tokens(checkpoint)
    report = probe_disentanglement(tokens, manifest, _backend(args, manifest), default_suite().image,
                                   seeds=(args.seed, args.seed + 1), checkpoint_id=checkpoint.name,
                                   sampler_steps=args.sampler_steps, guidance_scale=args.guidance_scale)
    written = write_probe(report, _out_dir(args))
    return CommandResult(artifacts_written=written, summary=[
        f"subject margin {report.subject_margin:.4f}, background margin {report.background_margin:.4f}",
    ])


COMMANDS = {
    "validate-data": _cmd_validate_data,
    "synth-data": _cmd_synth_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "curve": _cmd_curve,
    "ablate-schedule": _cmd_ablate_schedule,
    "probe": _cmd_probe,
}


# ─── Parser ───

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("--manifest", default=None)
    common.add_argument("--backbone", default=None, help="backend archive; a fresh toy backend otherwise")

    training = _Parser(add_help=False)
    training.add_argument("--subject", default=None)
    training.add_argument("--method", choices=METHOD_TAGS, default=None)
    training.add_argument("--steps", type=int, default=None)
    training.add_argument("--lr", type=float, default=None)
    training.add_argument("--batch", type=int, default=None)
    training.add_argument("--weights", default=None, help="ws,wb,wi,wcmax")
    training.add_argument("--tau", type=float, default=None)
    training.add_argument("--schedule", choices=SCHEDULE_KINDS, default=None)
    training.add_argument("--pool-mix", default=None, help="subject,background,joint")
    training.add_argument("--config", default=None, help="training config JSON")
    training.add_argument("--checkpoint-interval", type=int, default=None)
    training.add_argument("--no-masks", action="store_true")
    training.add_argument("--init", choices=("supercategory_word", "random"), default=None)

    sampling = _Parser(add_help=False)
    sampling.add_argument("--images-per-prompt", type=int, default=settings.IMAGES_PER_PROMPT)
    sampling.add_argument("--sampler-steps", type=int, default=settings.SAMPLER_STEPS)
    sampling.add_argument("--guidance-scale", type=float, default=settings.GUIDANCE_SCALE)

    parser = _Parser(prog="personalize", description="Subject personalization toolkit for diffusion models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-data", parents=[common])
    p.add_argument("--profile", choices=("toy", "full"), default="toy")

    p = sub.add_parser("synth-data", parents=[common])
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--images-per-subject", type=int, default=15)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--captions-per-image", type=int, default=3)

    p = sub.add_parser("pretrain", parents=[common])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = sub.add_parser("train", parents=[common, training])
    p.add_argument("--checkpoint", default=None, help="trainer checkpoint to resume from")

    for name in ("generate", "evaluate"):
        p = sub.add_parser(name, parents=[common, sampling])
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("curve", parents=[common, sampling])
    p.add_argument("--checkpoints", nargs="+", default=None)

    p = sub.add_parser("ablate-schedule", parents=[common, training, sampling])
    p.add_argument("--kinds", default=None, help="comma-separated schedule kinds")

    p = sub.add_parser("probe", parents=[common, sampling])
    p.add_argument("--checkpoint", default=None)
    return parser


# ─── Entry points ───

def run_command(argv: Sequence[str]) -> CommandResult:
    """Parse and run one command; errors become exit codes, never tracebacks."""
    try:
        args = build_parser().parse_args(list(argv))
        result = COMMANDS[args.command](args)
    except PersonalizeError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return CommandResult(exit_code=exc.exit_code, summary=[f"error: {exc}"])
    except Exception as exc:
        logger.error("Unhandled exception: %s", exc, exc_info=True)
        return CommandResult(exit_code=1, summary=[f"unexpected error: {exc}"])
    for path in result.artifacts_written:
        logger.debug("Wrote %s", path)
    return result


def main(argv: Sequence[str] | None = None) -> None:
    setup_logging()
    if settings.SENTRY_DSN:
        sentry_sdk.init(
            dsn=settings.SENTRY_DSN,
            traces_sample_rate=settings.SENTRY_TRACES_SAMPLE_RATE,
            environment=settings.APP_ENV,
            send_default_pii=False,
        )
        logger.info("Sentry initialized")
    result = run_command(sys.argv[1:] if argv is None else argv)
    for line in result.summary:
        print(line)
    sys.exit(result.exit_code)


if __name__ == "__main__":
    main()
