"""Desk-scale experiments on synthetic data: training progress over a full run,
the attractor probe after training and the overfit curve on a memorizing
backbone.

These train for hundreds to thousands of steps on a pretrained toy backbone;
deselect them with ``-m "not slow"``.
"""
import csv
import json

import pytest

from app.core.determinism import torch_generator
from app.diffusion.backend import DiffusionBackend, build_toy_backend
from app.diffusion.pretrain import pretrain_backbone
from app.embedders.tokenizer import build_vocabulary
from app.embedders.tokens import load_learned_tokens
from app.schemas.backend import BackboneSpec
from app.schemas.dataset import DatasetManifest, ToyDatasetSpec
from app.schemas.training import TrainingConfig
from app.services.checkpoints import TrainerState, load_checkpoint
from app.services.embedding_models import default_suite
from app.services.evaluation import fsum_mean, overfit_curve, probe_disentanglement
from app.services.prompts import build_prompt_pools
from app.services.reporting import write_curve, write_probe
from app.services.toy_data import synth_toy_dataset
from app.services.trainer import (
    FINAL_CHECKPOINT,
    TrainingBatch,
    assemble_batch,
    init_trainer_state,
    load_subject_images,
    train,
    train_step,
)

pytestmark = pytest.mark.slow

# 2 subjects x (5 train + 10 test) images at 16 px.
SMOKE_SPEC = ToyDatasetSpec(n_subjects=2, images_per_subject=15, image_size=16, seed=7)
# Pretraining corpus: other subjects drawn from the same shape/pattern vocabulary.
CORPUS_SPEC = ToyDatasetSpec(n_subjects=6, images_per_subject=15, image_size=16, seed=1000)

SMOKE_CONFIG = TrainingConfig.for_method("ti+", total_steps=500, batch_size=8, learning_rate=5e-3,
                                         checkpoint_interval=250, seed=0)

# One training image and three test images, small enough to memorize.
OVERFIT_SPEC = ToyDatasetSpec(n_subjects=1, images_per_subject=4, train_fraction=0.25, image_size=8, seed=11,
                              captions_per_image=2)
OVERFIT_BACKBONE = BackboneSpec(
    image_size=8,
    embedding_dim=8,
    context_length=24,
    hidden_channels=32,
    layer_count=4,
    num_timesteps=100,
    schedule_kind="linear",
    text_layers=1,
    text_heads=2,
)
OVERFIT_CHUNK = 1000
OVERFIT_MAX_CHUNKS = 12


# ─── Fixtures ─────────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def smoke_manifest(tmp_path_factory) -> DatasetManifest:
    return synth_toy_dataset(SMOKE_SPEC, tmp_path_factory.mktemp("smoke"))


@pytest.fixture(scope="module")
def pretrained_backend(smoke_manifest, tmp_path_factory) -> DiffusionBackend:
    corpus = synth_toy_dataset(CORPUS_SPEC, tmp_path_factory.mktemp("corpus"))
    vocabulary = build_vocabulary(smoke_manifest, extra=build_vocabulary(corpus))
    backend = build_toy_backend(BackboneSpec(image_size=16), vocabulary, seed=0)
    pretrain_backbone(backend, corpus, steps=1500, learning_rate=1e-3, batch_size=8, seed=0)
    return backend


@pytest.fixture(scope="module")
def smoke_runs(smoke_manifest, pretrained_backend, tmp_path_factory) -> dict:
    """Output directory of a 500-step ti+ run per subject."""
    runs = {}
    for subject in smoke_manifest.subjects:
        out = tmp_path_factory.mktemp(f"run-{subject.id}")
        train(SMOKE_CONFIG, smoke_manifest, subject.id, pretrained_backend, out)
        runs[subject.id] = out
    return runs


# ─── Helpers ──────────────────────────────────────────────────────────────────

def _joint_batch(manifest, subject_id, backend, size: int = 64) -> TrainingBatch:
    config = SMOKE_CONFIG.model_copy(update={"pool_mix": (0.0, 0.0, 1.0), "batch_size": size})
    subject = manifest.subject(subject_id)
    return assemble_batch(manifest, subject_id, build_prompt_pools(subject.supercategory), config,
                          torch_generator(123), num_timesteps=backend.schedule.T,
                          latent_shape=backend.latent_shape)


def _joint_loss(state: TrainerState, manifest, backend, batch) -> float:
    """l_joint of ``state`` on a fixed batch, leaving the tokens untouched."""
    for group in state.optimizer.param_groups:
        group["lr"] = 0.0
    images = load_subject_images(manifest, state.subject_id, backend)
    _, breakdown = train_step(state, batch, backend, images)
    return float(breakdown.l_joint)


def _training_only(manifest: DatasetManifest) -> DatasetManifest:
    """The manifest's training images alone, without layer renderings or test images."""
    subjects = [
        subject.model_copy(update={
            "train": [r.model_copy(update={"subject_layer": None, "background_layer": None}) for r in subject.train],
            "test": [],
        })
        for subject in manifest.subjects
    ]
    return DatasetManifest(root=manifest.root, subjects=subjects, root_path=manifest.root_path)


# ─── Training progress ────────────────────────────────────────────────────────

def test_full_run_lowers_joint_loss(smoke_manifest, pretrained_backend, smoke_runs):
    sid = smoke_manifest.subjects[0].id
    batch = _joint_batch(smoke_manifest, sid, pretrained_backend)
    initial = _joint_loss(init_trainer_state(SMOKE_CONFIG, smoke_manifest, sid, pretrained_backend),
                          smoke_manifest, pretrained_backend, batch)
    final_state = load_checkpoint(smoke_runs[sid] / FINAL_CHECKPOINT)
    assert final_state.step == SMOKE_CONFIG.total_steps
    final = _joint_loss(final_state, smoke_manifest, pretrained_backend, batch)
    assert final < initial


# ─── Attractor probe after training ───────────────────────────────────────────

@pytest.mark.parametrize("index", [0, 1])
def test_trained_tokens_separate_subject_from_background(smoke_manifest, pretrained_backend, smoke_runs,
                                                         index, tmp_path):
    sid = smoke_manifest.subjects[index].id
    tokens = load_learned_tokens(smoke_runs[sid] / FINAL_CHECKPOINT)
    report = probe_disentanglement(tokens, smoke_manifest, pretrained_backend, default_suite().image,
                                   seeds=(0, 1), checkpoint_id=FINAL_CHECKPOINT, sampler_steps=25,
                                   guidance_scale=1.0)
    path = write_probe(report, tmp_path)[0]
    assert json.loads(path.read_text(encoding="utf-8"))["subject_id"] == sid
    assert len(report.scores) == 2 * len(smoke_manifest.subjects[index].train)
    assert report.subject_margin > 0, report
    assert report.background_margin > 0, report


# ─── Overfit curve ────────────────────────────────────────────────────────────

def test_memorizing_backbone_scores_higher_on_train_split(tmp_path):
    manifest = synth_toy_dataset(OVERFIT_SPEC, tmp_path / "data")
    sid = manifest.subjects[0].id
    backend = build_toy_backend(OVERFIT_BACKBONE, build_vocabulary(manifest), seed=0)

    # Fine-tune the whole denoiser on the single training image until the
    # joint loss falls below a tenth of where it started.
    memorize = _training_only(manifest)
    trace: list[float] = []
    for chunk in range(OVERFIT_MAX_CHUNKS):
        trace += pretrain_backbone(backend, memorize, steps=OVERFIT_CHUNK, learning_rate=2e-3 * 0.7**chunk,
                                   batch_size=16, seed=chunk)
        if fsum_mean(trace[-200:]) < 0.1 * fsum_mean(trace[:5]):
            break
    assert fsum_mean(trace[-200:]) < 0.1 * fsum_mean(trace[:5])

    config = TrainingConfig.for_method("ti", total_steps=2, batch_size=2, learning_rate=1e-2,
                                       checkpoint_interval=1)
    written = train(config, manifest, sid, backend, tmp_path / "run")
    checkpoints = [p for p in written if p.name != FINAL_CHECKPOINT]
    curve = overfit_curve(checkpoints, manifest, backend, default_suite(), images_per_prompt=1,
                          sampler_steps=10, guidance_scale=1.0)

    assert [(r.step, r.split) for r in curve.rows] == [(1, "train"), (1, "test"), (2, "train"), (2, "test")]
    final = {r.split: r for r in curve.rows if r.step == 2}
    assert final["train"].image_image_sim_selfsup >= final["test"].image_image_sim_selfsup
    assert final["train"].image_image_sim_contrastive >= final["test"].image_image_sim_contrastive

    write_curve(curve, tmp_path / "curve")
    with (tmp_path / "curve" / "curve.csv").open(encoding="utf-8") as fh:
        assert len(list(csv.DictReader(fh))) == len(checkpoints) * 2
