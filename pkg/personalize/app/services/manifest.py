"""Dataset manifest loading, serialization and validation.

The manifest is a single JSON document:

    {"schema_version": 1, "root": ".",
     "subjects": [{"id": ..., "supercategory": ...,
                   "train": [{"image": ..., "mask": ...}],
                   "test":  [{"image": ..., "captions": [...]}]}]}

Paths are forward-slash and relative to ``root``, which itself is relative to
the manifest file's directory.
"""
import json
import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import ValidationError

from app.core.errors import MissingFileError, ParseError, PlaceholderError
from app.schemas.dataset import (
    FULL_CAPTIONS_PER_TEST_IMAGE,
    FULL_SUBJECTS,
    FULL_TEST_IMAGES,
    FULL_TRAIN_IMAGES,
    DatasetManifest,
    ImageRecord,
    Profile,
    SubjectRecord,
    ValidationReport,
    Violation,
)

logger = logging.getLogger(__name__)

PLACEHOLDER = "{}"

_WORD_RE = re.compile(r"[a-z0-9]+(?:[-_][a-z0-9]+)*")


# ─── Load / dump ───

def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file and resolve every image/mask path against its root.

    Raises ParseError for malformed documents and MissingFileError naming the
    first referenced file that does not exist.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFileError(path) from exc
    except (UnicodeDecodeError, OSError) as exc:
        raise ParseError(f"Malformed manifest {path}: cannot read as UTF-8 text ({exc})") from exc
    try:
        manifest = DatasetManifest.model_validate_json(text)
    except ValidationError as exc:
        raise ParseError(f"Malformed manifest {path}: {exc.error_count()} error(s): {exc.errors()[0]['msg']}") from exc

    manifest.root_path = (path.parent / Path(*manifest.root.split("/"))).resolve()
    for subject in manifest.subjects:
        for record in [*subject.train, *subject.test]:
            record.image_path = manifest.resolve(record.image)
            if not record.image_path.exists():
                raise MissingFileError(record.image_path)
            if record.mask is not None:
                record.mask_path = manifest.resolve(record.mask)
                if not record.mask_path.exists():
                    raise MissingFileError(record.mask_path)

    logger.info("Loaded manifest %s: %d subjects", path, len(manifest.subjects))
    return manifest


def dump_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the wire format deterministically (sorted keys, 2-space indent)."""
    path = Path(path)
    payload = manifest.model_dump(mode="json", exclude_none=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ─── Captions ───

def fill_caption(caption: str, replacement: str) -> str:
    """Substitute the single ``{}`` placeholder and collapse whitespace."""
    count = caption.count(PLACEHOLDER)
    if count != 1:
        raise PlaceholderError(f"caption must contain exactly one '{{}}', found {count}: {caption!r}")
    return " ".join(caption.replace(PLACEHOLDER, replacement).split())


def caption_words(caption: str) -> set[str]:
    return set(_WORD_RE.findall(caption.lower()))


def caption_leaks(caption: str, subject: SubjectRecord) -> list[str]:
    """Subject identifiers appearing as whole words (case-insensitive) in a caption."""
    words = caption_words(caption)
    return [term for term in (subject.id.lower(), subject.supercategory.lower()) if term in words]


# ─── Validation ───

def validate_manifest(manifest: DatasetManifest, profile: Profile = "toy") -> ValidationReport:
    """List every violated dataset invariant. Never raises on bad data."""
    report = ValidationReport(profile=profile)
    violations = report.violations

    seen: set[str] = set()
    for subject in manifest.subjects:
        if subject.id in seen:
            violations.append(Violation(code="duplicate_subject", subject_id=subject.id,
                                        message=f"subject id {subject.id!r} is not unique"))
        seen.add(subject.id)
        _check_subject(subject, profile, violations)
        report.train_images += len(subject.train)
        report.test_images += len(subject.test)
        report.captions += sum(len(r.captions) for r in subject.test)

    report.subjects = len(manifest.subjects)
    if profile == "full" and report.subjects != FULL_SUBJECTS:
        violations.append(Violation(code="counts",
                                    message=f"full profile needs {FULL_SUBJECTS} subjects, found {report.subjects}"))
    if profile == "toy" and report.subjects < 1:
        violations.append(Violation(code="counts", message="manifest has no subjects"))
    return report


def _check_subject(subject: SubjectRecord, profile: Profile, violations: list[Violation]) -> None:
    sid = subject.id

    if len(subject.supercategory.split()) != 1 or subject.supercategory != subject.supercategory.strip():
        violations.append(Violation(code="supercategory", subject_id=sid,
                                    message=f"supercategory {subject.supercategory!r} must be one whitespace-free token"))

    train_ids = {r.image for r in subject.train}
    for overlap in sorted(train_ids & {r.image for r in subject.test}):
        violations.append(Violation(code="split_overlap", subject_id=sid, image=overlap,
                                    message="image appears in both train and test splits"))

    if profile == "full":
        expected = [("train", len(subject.train), FULL_TRAIN_IMAGES), ("test", len(subject.test), FULL_TEST_IMAGES)]
        for split, found, needed in expected:
            if found != needed:
                violations.append(Violation(code="counts", subject_id=sid,
                                            message=f"{split} split needs {needed} images, found {found}"))
    elif not subject.train:
        violations.append(Violation(code="counts", subject_id=sid, message="subject has no training images"))

    for record in subject.train:
        if record.mask is None:
            violations.append(Violation(code="mask_missing", subject_id=sid, image=record.image,
                                        message="training image has no mask"))
        else:
            _check_mask(record, sid, violations)

    for record in subject.test:
        needed = FULL_CAPTIONS_PER_TEST_IMAGE if profile == "full" else 1
        if (profile == "full" and len(record.captions) != needed) or len(record.captions) < needed:
            violations.append(Violation(code="counts", subject_id=sid, image=record.image,
                                        message=f"test image needs {'exactly' if profile == 'full' else 'at least'} "
                                                f"{needed} caption(s), found {len(record.captions)}"))
        if len(set(record.captions)) != len(record.captions):
            violations.append(Violation(code="caption_duplicate", subject_id=sid, image=record.image,
                                        message="test image captions must be unique"))
        for caption in record.captions:
            placeholders = caption.count(PLACEHOLDER)
            if placeholders != 1:
                violations.append(Violation(code="placeholder", subject_id=sid, image=record.image,
                                            message=f"caption has {placeholders} placeholders: {caption!r}"))
            for term in caption_leaks(caption, subject):
                violations.append(Violation(code="leak", subject_id=sid, image=record.image,
                                            message=f"caption mentions {term!r}: {caption!r}"))


def _check_mask(record: ImageRecord, subject_id: str, violations: list[Violation]) -> None:
    # Binarity is checked on the raw file; complementarity follows from deriving M_b = 1 - M_s.
    if record.mask_path is None or record.image_path is None:
        return
    if not record.mask_path.exists():
        violations.append(Violation(code="mask_missing", subject_id=subject_id, image=record.image,
                                    message=f"mask file missing: {record.mask}"))
        return
    with Image.open(record.mask_path) as mask_img:
        mask = np.asarray(mask_img.convert("L"))
    if not np.isin(mask, (0, 255)).all():
        violations.append(Violation(code="mask_binary", subject_id=subject_id, image=record.image,
                                    message="mask values must be exactly 0 or 255"))
    if record.image_path.exists():
        with Image.open(record.image_path) as img:
            size = img.size
        if (mask.shape[1], mask.shape[0]) != size:
            violations.append(Violation(code="mask_shape", subject_id=subject_id, image=record.image,
                                        message=f"mask size {mask.shape[::-1]} differs from image size {size}"))
