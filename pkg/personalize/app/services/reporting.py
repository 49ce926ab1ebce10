"""Report, curve and ablation artifacts: JSON documents, flat CSV tables, markdown and plots."""
import csv
import io
import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from app.schemas.evaluation import (  # noqa: E402
    METRICS,
    SPLIT_ORDER,
    AblationReport,
    CurveReport,
    DisentanglementReport,
    EvaluationReport,
)

logger = logging.getLogger(__name__)

_PNG_METADATA = {"Software": None}


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> Path:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(output.getvalue(), encoding="utf-8")
    return path


def _write_json(path: Path, text: str) -> Path:
    path.write_text(text + "\n", encoding="utf-8")
    return path


def markdown_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    def cell(value: object) -> str:
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
        *("| " + " | ".join(cell(v) for v in row) + " |" for row in rows),
    ]
    return "\n".join(lines) + "\n"


# ─── Generated images ───

def save_generated(images: dict[tuple[str, str, int, int], np.ndarray], out_dir: Path) -> list[Path]:
    """One PNG per task: <subject>/<reference stem>_c<caption>_s<sample>.png."""
    written = []
    for (subject_id, image_id, caption_index, sample_index), image in sorted(images.items()):
        stem = Path(image_id).stem
        path = out_dir / subject_id / f"{stem}_c{caption_index:02d}_s{sample_index:02d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image).save(path, format="PNG")
        written.append(path)
    return written


# ─── Evaluation report ───

def write_report(report: EvaluationReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["subject_id", "image_id", "caption_index", "sample_index", "seed", *METRICS]
    rows = [[getattr(s, h) for h in header] for s in report.scores]
    written = [
        _write_json(out_dir / "report.json", report.model_dump_json(indent=2)),
        _write_csv(out_dir / "scores.csv", header, rows),
    ]
    summary = [[s.subject_id, s.n_images, *(getattr(s.means, m) for m in METRICS)] for s in report.subjects]
    summary.append(["(all)", report.n_images, *(getattr(report.aggregate, m) for m in METRICS)])
    (out_dir / "report.md").write_text(
        f"# {report.split} split, {report.checkpoint_id}\n\n" + markdown_table(["subject", "images", *METRICS], summary),
        encoding="utf-8",
    )
    written.append(out_dir / "report.md")
    logger.info("Wrote evaluation report (%d images) to %s", report.n_images, out_dir)
    return written


# ─── Overfit curve ───

def plot_curve(curve: CurveReport, path: Path) -> Path:
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for ax, metric in zip(axes, METRICS, strict=True):
        for split in SPLIT_ORDER:
            rows = [r for r in curve.rows if r.split == split]
            ax.plot([r.step for r in rows], [getattr(r, metric) for r in rows], marker="o", label=split)
        ax.set_title(metric)
        ax.set_xlabel("step")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def write_curve(curve: CurveReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["step", "split", "checkpoint_id", *METRICS]
    rows = [[getattr(r, h) for h in header] for r in curve.rows]
    return [
        _write_json(out_dir / "curve.json", curve.model_dump_json(indent=2)),
        _write_csv(out_dir / "curve.csv", header, rows),
        plot_curve(curve, out_dir / "curve.png"),
    ]


# ─── Attractor probe ───

def write_probe(report: DisentanglementReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    return [_write_json(out_dir / f"probe-{report.subject_id}.json", report.model_dump_json(indent=2))]


# ─── Ablation ───

ABLATION_COLUMNS = ["kind", "n_images", "final_total_loss", *METRICS]


def plot_ablation(report: AblationReport, path: Path) -> Path:
    kinds = [r.kind for r in report.rows]
    x = np.arange(len(kinds))
    width = 0.8 / len(METRICS)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.5 * len(kinds)), 3.5))
    for i, metric in enumerate(METRICS):
        ax.bar(x + i * width, [getattr(r, metric) for r in report.rows], width, label=metric)
    ax.set_xticks(x + width * (len(METRICS) - 1) / 2, kinds)
    ax.set_ylabel("similarity")
    ax.set_title(f"contrastive weighting, {report.steps} steps")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def write_ablation(report: AblationReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [[getattr(r, c) for c in ABLATION_COLUMNS] for r in report.rows]
    (out_dir / "ablation.md").write_text(markdown_table(ABLATION_COLUMNS, rows), encoding="utf-8")
    return [
        _write_json(out_dir / "ablation.json", report.model_dump_json(indent=2)),
        _write_csv(out_dir / "ablation.csv", ABLATION_COLUMNS, rows),
        out_dir / "ablation.md",
        plot_ablation(report, out_dir / "ablation.png"),
    ]
