"""Evaluation plans, score reports, overfit curves and probe results."""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

Split = Literal["train", "test"]
SPLIT_ORDER: tuple[Split, ...] = ("train", "test")

METRICS = ("text_image_sim", "image_image_sim_contrastive", "image_image_sim_selfsup")


# ─── Plan ───

class EvaluationTask(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    image_id: str        # reference image the caption was written for
    caption_index: int
    caption: str         # template with one {} placeholder
    sample_index: int
    seed: int
    split: Split

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.subject_id, self.image_id, self.caption_index, self.sample_index)


class EvaluationPlan(BaseModel):
    split: Split
    images_per_prompt: int
    seed: int
    tasks: list[EvaluationTask] = Field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.tasks)

    def per_subject(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for task in self.tasks:
            counts[task.subject_id] = counts.get(task.subject_id, 0) + 1
        return counts


# ─── Scores ───

class MetricMeans(BaseModel):
    text_image_sim: float
    image_image_sim_contrastive: float
    image_image_sim_selfsup: float


class ImageScore(BaseModel):
    subject_id: str
    image_id: str
    caption_index: int
    sample_index: int
    seed: int
    text_image_sim: float = Field(ge=-1.0, le=1.0)
    image_image_sim_contrastive: float = Field(ge=-1.0, le=1.0)
    image_image_sim_selfsup: float = Field(ge=-1.0, le=1.0)


class SubjectScores(BaseModel):
    subject_id: str
    n_images: int
    means: MetricMeans


class EvaluationReport(BaseModel):
    split: Split
    checkpoint_id: str
    n_images: int
    aggregate: MetricMeans
    subjects: list[SubjectScores]
    scores: list[ImageScore]


# ─── Curves ───

class CurveRow(BaseModel):
    step: int
    split: Split
    checkpoint_id: str
    text_image_sim: float
    image_image_sim_contrastive: float
    image_image_sim_selfsup: float


class CurveReport(BaseModel):
    rows: list[CurveRow] = Field(default_factory=list)


# ─── Attractor probe ───

class ProbeScore(BaseModel):
    image_id: str
    seed: int
    subject_token_vs_subject_layer: float
    subject_token_vs_background_layer: float
    attractor_vs_subject_layer: float
    attractor_vs_background_layer: float


class DisentanglementReport(BaseModel):
    subject_id: str
    checkpoint_id: str
    scores: list[ProbeScore]
    subject_token_vs_subject_layer: float
    subject_token_vs_background_layer: float
    attractor_vs_subject_layer: float
    attractor_vs_background_layer: float

    @property
    def subject_margin(self) -> float:
        """How much closer <v*> renders are to the subject layer than <A*> renders are."""
        return self.subject_token_vs_subject_layer - self.attractor_vs_subject_layer

    @property
    def background_margin(self) -> float:
        return self.attractor_vs_background_layer - self.subject_token_vs_background_layer


# ─── Ablation ───

class AblationRow(BaseModel):
    kind: str
    n_images: int
    final_total_loss: float
    text_image_sim: float
    image_image_sim_contrastive: float
    image_image_sim_selfsup: float


class AblationReport(BaseModel):
    steps: int
    rows: list[AblationRow] = Field(default_factory=list)
