"""Procedural toy dataset in the split-test-set layout.

Each subject is a colored shape composited over procedural backgrounds. The
generator emits exact binary masks, the subject and background layers on their
own, and captions built from the composition parameters. Output is a pure
function of the ToyDatasetSpec: same spec, same bytes.
"""
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from app.core.config import settings
from app.core.errors import SpecError
from app.schemas.dataset import DatasetManifest, ImageRecord, SubjectRecord, ToyDatasetSpec
from app.services.manifest import dump_manifest, load_manifest

logger = logging.getLogger(__name__)

SHAPES = ("disc", "square", "triangle", "diamond", "ring", "cross")

SUBJECT_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "blue": (40, 80, 220),
    "yellow": (235, 210, 40),
    "green": (40, 170, 70),
    "purple": (150, 60, 190),
    "orange": (240, 140, 30),
}

BACKGROUND_COLORS: dict[str, tuple[int, int, int]] = {
    "gray": (120, 120, 120),
    "teal": (30, 120, 120),
    "brown": (120, 80, 40),
    "pink": (230, 160, 190),
    "navy": (20, 30, 80),
    "olive": (110, 120, 40),
    "white": (240, 240, 240),
    "black": (15, 15, 15),
}

BACKGROUND_KINDS = ("plain", "striped", "checkered", "gradient", "dotted")

CAPTION_TEMPLATES = (
    "a photo of {{}} on a {pattern} {color} background.",
    "{{}} in the {vpos} {hpos} of the frame.",
    "a picture of {{}} against {color} and {color2}.",
    "a {size} {{}} on a {pattern} backdrop.",
    "{{}} near the {vpos} of a {color} scene.",
    "a close-up photo of {{}} with a {pattern} background.",
)

LAYER_FILL = (128, 128, 128)  # canvas behind the subject-only layer


# ─── Rendering ───

def render_subject_shape(shape: str, size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    """Rasterize ``shape`` on a size x size grid; True where a pixel center is inside."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - center[0], xx - center[1]
    if shape == "disc":
        inside = dy**2 + dx**2 <= radius**2
    elif shape == "square":
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * radius
    elif shape == "diamond":
        inside = np.abs(dy) + np.abs(dx) <= radius
    elif shape == "ring":
        dist = np.sqrt(dy**2 + dx**2)
        inside = (dist <= radius) & (dist >= 0.5 * radius)
    elif shape == "cross":
        arm = 0.35 * radius
        inside = ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    elif shape == "triangle":
        inside = (dy >= -radius) & (dy <= 0.8 * radius) & (np.abs(dx) <= 0.55 * (dy + radius))
    else:
        raise SpecError(f"unknown shape {shape!r}")
    return inside


def _render_background(kind: str, size: int, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    period = max(2, size // 4)
    if kind == "plain":
        sel = np.zeros((size, size), dtype=bool)
    elif kind == "striped":
        sel = (yy // (period // 2 or 1)) % 2 == 1
    elif kind == "checkered":
        sel = (yy // period + xx // period) % 2 == 1
    elif kind == "dotted":
        sel = (yy % period == period // 2) & (xx % period == period // 2)
    elif kind == "gradient":
        w = (yy / max(size - 1, 1))[..., None]
        return (1.0 - w) * c1 + w * c2
    else:
        raise SpecError(f"unknown background kind {kind!r}")
    return np.where(sel[..., None], c2, c1).astype(np.float64)


def _position_words(center: tuple[float, float], size: int) -> tuple[str, str]:
    def bucket(v: float, words: tuple[str, str, str]) -> str:
        return words[0] if v < size / 3 else words[2] if v > 2 * size / 3 else words[1]

    return bucket(center[0], ("top", "middle", "bottom")), bucket(center[1], ("left", "center", "right"))


def _save_rgb(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8)).save(path, format="PNG")


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path, format="PNG")


# ─── Generator ───

def synth_toy_dataset(spec: ToyDatasetSpec, out_dir: str | Path | None = None) -> DatasetManifest:
    """Write a toy dataset under ``out_dir`` and return its loaded manifest."""
    if spec.n_subjects < 1 or spec.images_per_subject < 2:
        raise SpecError("n_subjects must be >= 1 and images_per_subject >= 2")
    if spec.image_size < 8:
        raise SpecError(f"image_size must be >= 8, got {spec.image_size}")
    if not 0.0 < spec.train_fraction < 1.0:
        raise SpecError(f"train_fraction must lie in (0, 1), got {spec.train_fraction}")
    if spec.captions_per_image < 1:
        raise SpecError("captions_per_image must be >= 1")

    root = Path(out_dir) if out_dir is not None else settings.cache_dir / "datasets" / f"toy-{spec.seed}"
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    n_train = min(spec.images_per_subject - 1, max(1, round(spec.images_per_subject * spec.train_fraction)))
    subject_colors = list(SUBJECT_COLORS)
    subjects: list[SubjectRecord] = []

    for i in range(spec.n_subjects):
        shape = SHAPES[i % len(SHAPES)]
        color = subject_colors[(i + i // len(SHAPES)) % len(subject_colors)]
        subject_id = f"subject-{i:02d}"
        records: list[ImageRecord] = []
        for k in range(spec.images_per_subject):
            split = "train" if k < n_train else "test"
            index = k if split == "train" else k - n_train
            records.append(
                _compose_image(root, rng, spec, subject_id, shape, color, split, index, with_captions=split == "test")
            )
        subjects.append(
            SubjectRecord(id=subject_id, supercategory=shape, train=records[:n_train], test=records[n_train:])
        )

    manifest_path = root / "manifest.json"
    dump_manifest(DatasetManifest(root=".", subjects=subjects), manifest_path)
    logger.info("Synthesized toy dataset at %s (%d subjects, %d images each)",
                root, spec.n_subjects, spec.images_per_subject)
    return load_manifest(manifest_path)


def _compose_image(
    root: Path,
    rng: np.random.Generator,
    spec: ToyDatasetSpec,
    subject_id: str,
    shape: str,
    color: str,
    split: str,
    index: int,
    with_captions: bool,
) -> ImageRecord:
    size = spec.image_size
    kind = BACKGROUND_KINDS[int(rng.integers(len(BACKGROUND_KINDS)))]
    bg_names = list(BACKGROUND_COLORS)
    first, second = rng.choice(len(bg_names), size=2, replace=False)
    c1_name, c2_name = bg_names[int(first)], bg_names[int(second)]
    radius = float(size * rng.uniform(0.2, 0.3))
    margin = radius + 0.5
    center = (float(rng.uniform(margin, size - margin)), float(rng.uniform(margin, size - margin)))

    background = _render_background(kind, size, np.array(BACKGROUND_COLORS[c1_name], dtype=np.float64),
                                    np.array(BACKGROUND_COLORS[c2_name], dtype=np.float64))
    mask = render_subject_shape(shape, size, center, radius)
    fill = np.array(SUBJECT_COLORS[color], dtype=np.float64)
    composite = np.where(mask[..., None], fill, background)
    subject_layer = np.where(mask[..., None], fill, np.array(LAYER_FILL, dtype=np.float64))

    stem = f"subjects/{subject_id}/{split}/{index:03d}"
    _save_rgb(composite, root / f"{stem}.png")
    _save_mask(mask, root / f"{stem}_mask.png")
    _save_rgb(subject_layer, root / f"{stem}_subject.png")
    _save_rgb(background, root / f"{stem}_background.png")

    captions: list[str] = []
    if with_captions:
        vpos, hpos = _position_words(center, size)
        words = {
            "pattern": kind,
            "color": c1_name,
            "color2": c2_name,
            "vpos": vpos,
            "hpos": hpos,
            "size": "small" if radius < 0.25 * size else "large",
        }
        order = rng.permutation(len(CAPTION_TEMPLATES))
        count = min(spec.captions_per_image, len(CAPTION_TEMPLATES))
        captions = [CAPTION_TEMPLATES[int(j)].format(**words) for j in order[:count]]

    return ImageRecord(
        image=f"{stem}.png",
        mask=f"{stem}_mask.png",
        captions=captions,
        subject_layer=f"{stem}_subject.png",
        background_layer=f"{stem}_background.png",
        meta={
            "shape": shape,
            "subject_color": color,
            "subject_phrase": f"{color} {shape}",
            "center": [center[0], center[1]],
            "radius": radius,
            "background": kind,
            "background_colors": [c1_name, c2_name],
        },
    )
