"""Comparison protocol: bilinear vs CNN-only vs GAN vs the hr reference.

Every method at a given scale consumes the identical held-out test tiles.
The segmentation path runs the frozen segmenter on each method's output and
compares argmax masks against the exact ground truth; per-class IoUs are
pooled over the whole test set before the class mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import dataset as ds
from .errors import PrerequisiteError, ShapeError
from .metrics import (
    MetricsReport,
    build_report,
    pct_improvement,
    pooled_class_ious,
)
from .models import Generator, Segmenter, segment_labels, upscale

COMPARISON_SCHEMA = "semsr.comparison.v1"
CLASSWISE_SCHEMA = "semsr.classwise.v1"

METHODS = ("bilinear", "cnn", "gan", "hr-reference")


@dataclass
class ComparisonRow:
    scale: int
    method: str
    psnr: float
    ssim: float
    ms_ssim: float
    miou: float
    pct_improvement: float | None = None  # gan rows only: Eq. of (gan, cnn) mIoU


@dataclass
class ClasswiseRow:
    class_name: str
    iou_cnn: float | None
    iou_gan: float | None
    pct_improvement: float | None
    undefined: bool = False


def bilinear_baseline(lr: np.ndarray, scale: int) -> np.ndarray:
    """Upsample by plain bilinear interpolation (align-corners=false)."""
    ds.validate_scale(scale)
    lr = np.asarray(lr)
    if lr.ndim == 4:
        return np.stack([bilinear_baseline(t, scale) for t in lr])
    h, w = lr.shape[:2]
    return ds.bilinear_resize(lr, h * scale, w * scale)


def evaluate_method(
    upsampled: np.ndarray,
    hr: np.ndarray,
    labels: np.ndarray,
    segmenter: Segmenter,
    class_names: tuple,
    image_ids: list | None = None,
) -> MetricsReport:
    """Image metrics vs hr plus segmentation accuracy of the method's output."""
    if upsampled.shape != hr.shape:
        raise ShapeError(f"method output {upsampled.shape} vs hr {hr.shape}")
    if labels.shape[0] != hr.shape[0]:
        raise ShapeError("label batch size mismatch")
    pred = segment_labels(segmenter, upsampled)
    return build_report(upsampled, hr, pred, labels, class_names, image_ids)


def _method_outputs(
    method: str, test: dict, scale: int, generators: dict[str, Generator]
) -> np.ndarray:
    if method == "bilinear":
        return bilinear_baseline(test["lr"], scale)
    if method == "hr-reference":
        return test["hr"]
    return upscale(generators[method], test["lr"])


def evaluate_all_methods(
    manifest: ds.DatasetManifest,
    scale: int,
    segmenter: Segmenter,
    generators: dict[str, Generator],
    split: str = "test",
) -> dict[str, MetricsReport]:
    """Run every available method over one split at one scale."""
    recs = manifest.split_records(split)
    test = ds.load_batch(manifest, split, list(range(len(recs))), scale)
    ids = [f"tile_{s}" for s in test["seeds"]]
    reports = {}
    for method in METHODS:
        if method in ("cnn", "gan") and method not in generators:
            continue
        out = _method_outputs(method, test, scale, generators)
        reports[method] = evaluate_method(
            out, test["hr"], test["labels"], segmenter, manifest.class_names, ids
        )
    return reports


def compare_all(
    manifest: ds.DatasetManifest,
    scales: list[int],
    segmenter: Segmenter,
    generators_by_scale: dict[int, dict[str, Generator]],
    split: str = "test",
) -> list[ComparisonRow]:
    """One row per (scale, method), matching the summary-table protocol."""
    rows = []
    for scale in scales:
        gens = generators_by_scale.get(scale, {})
        for required in ("cnn", "gan"):
            if required not in gens:
                stage = "pretrain" if required == "cnn" else "finetune"
                raise PrerequisiteError(
                    stage, f"no {required} checkpoint for scale {scale}; run {stage} first"
                )
        reports = evaluate_all_methods(manifest, scale, segmenter, gens, split)
        miou_cnn = reports["cnn"].aggregate["miou"]
        for method in METHODS:
            agg = reports[method].aggregate
            rows.append(
                ComparisonRow(
                    scale=scale,
                    method=method,
                    psnr=agg["psnr"],
                    ssim=agg["ssim"],
                    ms_ssim=agg["ms_ssim"],
                    miou=agg["miou"],
                    pct_improvement=(
                        pct_improvement(agg["miou"], miou_cnn) if method == "gan" else None
                    ),
                )
            )
    return rows


def classwise_report(
    manifest: ds.DatasetManifest,
    scale: int,
    segmenter: Segmenter,
    gen_cnn: Generator,
    gen_gan: Generator,
    split: str = "test",
) -> list[ClasswiseRow]:
    """Per-class IoU of cnn vs gan outputs, ordered by improvement descending.

    Classes with an empty union across the whole split are marked undefined
    and sorted after every defined row.
    """
    recs = manifest.split_records(split)
    test = ds.load_batch(manifest, split, list(range(len(recs))), scale)
    k = manifest.class_count
    labels = list(test["labels"])
    ious = {}
    for name, gen in (("cnn", gen_cnn), ("gan", gen_gan)):
        out = upscale(gen, test["lr"])
        pred = segment_labels(segmenter, out)
        ious[name] = pooled_class_ious(list(pred), labels, k)
    rows = []
    for c, cname in enumerate(manifest.class_names):
        iou_cnn, iou_gan = ious["cnn"][c], ious["gan"][c]
        undefined = iou_cnn is None or iou_gan is None or iou_cnn == 0.0
        rows.append(
            ClasswiseRow(
                class_name=cname,
                iou_cnn=iou_cnn,
                iou_gan=iou_gan,
                pct_improvement=None if undefined else pct_improvement(iou_gan, iou_cnn),
                undefined=undefined,
            )
        )
    rows.sort(
        key=lambda r: (
            r.undefined,
            -r.pct_improvement if r.pct_improvement is not None else 0.0,
        )
    )
    return rows


# -- serialisation -----------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    if v == "inf":
        return math.inf
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            continue
    return v


def write_comparison_csv(rows: list[ComparisonRow], path) -> Path:
    path = Path(path)
    cols = ["scale", "method", "psnr", "ssim", "ms_ssim", "miou", "pct_improvement"]
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {COMPARISON_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(getattr(row, c)) for c in cols})
    return path


def read_comparison_csv(path) -> list[ComparisonRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# schema: {COMPARISON_SCHEMA}":
        raise ValueError(f"{path} is not a {COMPARISON_SCHEMA} file")
    return [
        ComparisonRow(**{k: _parse(v) for k, v in r.items()})
        for r in csv.DictReader(lines[1:])
    ]


def write_classwise_csv(rows: list[ClasswiseRow], path) -> Path:
    path = Path(path)
    cols = ["class_name", "iou_cnn", "iou_gan", "pct_improvement", "undefined"]
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {CLASSWISE_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            d = asdict(row)
            d["undefined"] = int(row.undefined)
            writer.writerow({c: _fmt(d[c]) for c in cols})
    return path


def read_classwise_csv(path) -> list[ClasswiseRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# schema: {CLASSWISE_SCHEMA}":
        raise ValueError(f"{path} is not a {CLASSWISE_SCHEMA} file")
    rows = []
    for r in csv.DictReader(lines[1:]):
        parsed = {k: _parse(v) for k, v in r.items()}
        parsed["undefined"] = bool(parsed["undefined"])
        rows.append(ClasswiseRow(**parsed))
    return rows


def emit_plots(
    comparison: list[ComparisonRow], classwise: list[ClasswiseRow], out_dir
) -> list[Path]:
    """Render the class-wise improvement bar chart and mIoU-vs-scale figure,
    and write the underlying CSVs next to them."""
    if not comparison and not classwise:
        raise ValueError("no rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    written.append(write_comparison_csv(comparison, out_dir / "comparison.csv"))
    written.append(write_classwise_csv(classwise, out_dir / "classwise.csv"))

    defined = [r for r in classwise if not r.undefined]
    fig, ax = plt.subplots(figsize=(7, 0.6 * max(len(defined), 4) + 1.2))
    names = [r.class_name for r in defined][::-1]
    vals = [r.pct_improvement for r in defined][::-1]
    ax.barh(names, vals, color="#2b7bba")
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("class-wise IoU improvement of gan over cnn (%)")
    ax.set_title("Per-class improvement")
    fig.tight_layout()
    bar_path = out_dir / "classwise_improvement.png"
    fig.savefig(bar_path, dpi=120)
    plt.close(fig)
    written.append(bar_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    scales = sorted({r.scale for r in comparison})
    for method in METHODS:
        pts = {r.scale: r.miou for r in comparison if r.method == method}
        if pts:
            ax.plot(scales, [pts[s] for s in scales], marker="o", label=method)
    ax.set_xscale("log", base=2)
    ax.set_xticks(scales)
    ax.set_xticklabels([f"{s}x" for s in scales])
    ax.set_xlabel("upsampling factor")
    ax.set_ylabel("mIoU")
    ax.set_title("Segmentation accuracy by method and scale")
    ax.legend()
    fig.tight_layout()
    line_path = out_dir / "miou_vs_scale.png"
    fig.savefig(line_path, dpi=120)
    plt.close(fig)
    written.append(line_path)
    return written
