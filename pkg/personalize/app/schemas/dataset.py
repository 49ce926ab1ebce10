"""Pydantic schemas for the split-test-set dataset manifest."""
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

SCHEMA_VERSION = 1

Profile = Literal["full", "toy"]

# Counts a "full" profile manifest must carry
FULL_SUBJECTS = 20
FULL_TRAIN_IMAGES = 5
FULL_TEST_IMAGES = 10
FULL_CAPTIONS_PER_TEST_IMAGE = 10


# ─── Manifest records ───

class ImageRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image: str
    mask: str | None = None
    captions: list[str] = Field(default_factory=list)
    subject_layer: str | None = None
    background_layer: str | None = None
    meta: dict[str, Any] = Field(default_factory=dict)

    # Filled by load_manifest; never serialized.
    image_path: Path | None = Field(default=None, exclude=True)
    mask_path: Path | None = Field(default=None, exclude=True)

    @property
    def image_id(self) -> str:
        """Stable identifier: the forward-slash relative image path."""
        return self.image


class SubjectRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    supercategory: str = Field(min_length=1)
    train: list[ImageRecord] = Field(default_factory=list)
    test: list[ImageRecord] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    root: str = "."
    subjects: list[SubjectRecord] = Field(default_factory=list)

    # Absolute root directory, filled by load_manifest.
    root_path: Path | None = Field(default=None, exclude=True)

    def subject(self, subject_id: str) -> SubjectRecord:
        for record in self.subjects:
            if record.id == subject_id:
                return record
        raise KeyError(subject_id)

    def resolve(self, relative: str) -> Path:
        base = self.root_path if self.root_path is not None else Path(self.root)
        return base / Path(*relative.split("/"))


# ─── Validation report ───

class Violation(BaseModel):
    code: str  # duplicate_subject, supercategory, split_overlap, counts, caption_duplicate, placeholder, leak, mask_missing, mask_binary, mask_shape
    message: str
    subject_id: str | None = None
    image: str | None = None


class ValidationReport(BaseModel):
    profile: Profile
    violations: list[Violation] = Field(default_factory=list)
    subjects: int = 0
    train_images: int = 0
    test_images: int = 0
    captions: int = 0

    @property
    def is_valid(self) -> bool:
        return not self.violations


# ─── Toy generator parameters ───

class ToyDatasetSpec(BaseModel):
    n_subjects: int = 2
    images_per_subject: int = 15
    train_fraction: float = 1 / 3
    image_size: int = 16
    seed: int = 0
    captions_per_image: int = 3
