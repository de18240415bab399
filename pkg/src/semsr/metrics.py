"""Full-reference image quality metrics and segmentation accuracy metrics.

All metrics are pure functions computed in float64 on channels-last numpy
arrays in [0, 1].  PSNR returns ``math.inf`` for identical inputs; the CSV
writer serialises that sentinel as the literal string ``inf``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIZE = SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)

METRICS_SCHEMA = "semsr.metrics.v1"


def _check_same_shape(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")


def mae(x: np.ndarray, y: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    return float(np.mean(np.abs(x - y)))


def psnr(x: np.ndarray, y: np.ndarray, max_i: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf when the images are identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_i * max_i / mse)


def _ssim_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation, then keep only windows fully inside the image."""
    r = (len(k) - 1) // 2
    out = correlate1d(img, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _ssim_maps(x: np.ndarray, y: np.ndarray, k1: float, k2: float, L: float):
    """Per-pixel luminance*structure map and contrast-structure map."""
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    k = _ssim_window()
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mu_x * mu_x
    syy = _filter_valid(y * y, k) - mu_y * mu_y
    sxy = _filter_valid(x * y, k) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum * cs, cs


def _channels(img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return [img]
    return [img[..., c] for c in range(img.shape[-1])]


def ssim(x: np.ndarray, y: np.ndarray, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    The map is averaged over valid window positions and over channels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    if min(x.shape[0], x.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape[:2]} smaller than SSIM window {SSIM_WINDOW}")
    vals = []
    for xc, yc in zip(_channels(x), _channels(y)):
        full, _ = _ssim_maps(xc, yc, k1, k2, L)
        vals.append(full.mean())
    return float(np.mean(vals))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    return (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(x: np.ndarray, y: np.ndarray, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Five-scale multi-scale SSIM with the canonical exponents.

    Contrast-structure means are taken at the four finer scales, the full
    SSIM at the coarsest; negative scale means are clamped to zero before
    the weighted product.  Scales are linked by 2x2 mean-pool downsampling.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    if min(x.shape[0], x.shape[1]) < MS_SSIM_MIN_SIZE:
        raise ShapeError(
            f"image {x.shape[:2]} too small for 5-scale MS-SSIM; "
            f"minimum side is {MS_SSIM_MIN_SIZE}"
        )
    vals = []
    for xc, yc in zip(_channels(x), _channels(y)):
        terms = []
        a, b = xc, yc
        for level in range(len(MS_SSIM_WEIGHTS)):
            full, cs = _ssim_maps(a, b, k1, k2, L)
            terms.append(full.mean() if level == len(MS_SSIM_WEIGHTS) - 1 else cs.mean())
            if level < len(MS_SSIM_WEIGHTS) - 1:
                a, b = _downsample2(a), _downsample2(b)
        prod = 1.0
        for t, w in zip(terms, MS_SSIM_WEIGHTS):
            prod *= max(t, 0.0) ** w
        vals.append(prod)
    return float(np.mean(vals))


def iou(pred: np.ndarray, target: np.ndarray, class_id: int) -> float | None:
    """Jaccard index for one class; None when the union is empty."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check_same_shape(pred, target)
    a = pred == class_id
    b = target == class_id
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


def miou(pred: np.ndarray, target: np.ndarray, class_count: int) -> float:
    """Mean IoU over classes with a nonempty union."""
    vals = [iou(pred, target, c) for c in range(class_count)]
    defined = [v for v in vals if v is not None]
    if not defined:
        raise ShapeError("mIoU undefined: every class has an empty union")
    return float(np.mean(defined))


def pct_improvement(a: float, b: float) -> float:
    """Relative improvement of a over baseline b, in percent."""
    if b == 0:
        raise ValueError("baseline is zero; percent improvement undefined")
    return (a - b) / b * 100.0


def mask_from_probs(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.uint8)


def pooled_class_ious(
    preds: list[np.ndarray], targets: list[np.ndarray], class_count: int
) -> list[float | None]:
    """Per-class IoU with intersections/unions pooled over a tile collection."""
    inter = np.zeros(class_count, dtype=np.int64)
    union = np.zeros(class_count, dtype=np.int64)
    for p, t in zip(preds, targets):
        _check_same_shape(np.asarray(p), np.asarray(t))
        for c in range(class_count):
            a = p == c
            b = t == c
            inter[c] += np.logical_and(a, b).sum()
            union[c] += np.logical_or(a, b).sum()
    return [float(inter[c] / union[c]) if union[c] > 0 else None for c in range(class_count)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    if v == "inf":
        return math.inf
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


@dataclass
class MetricsReport:
    """Per-image metric rows plus one aggregate row.

    ``rows`` entries are dicts with keys image_id, mae, psnr, ssim, ms_ssim,
    miou and iou_<class>.  The aggregate averages image metrics (an infinite
    PSNR propagates) while its per-class IoUs and mIoU are pooled over the
    whole tile set.
    """

    class_names: tuple
    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def columns(self) -> list:
        return ["image_id", "mae", "psnr", "ssim", "ms_ssim", "miou"] + [
            f"iou_{c}" for c in self.class_names
        ]

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = self.columns()
        with path.open("w", newline="") as fh:
            fh.write(f"# schema: {METRICS_SCHEMA}\n")
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows + [self.aggregate]:
                writer.writerow({c: _fmt(row.get(c)) for c in cols})
        return path

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("# schema: "):
            raise ValueError(f"{path} missing schema line")
        schema = lines[0].removeprefix("# schema: ").strip()
        if schema != METRICS_SCHEMA:
            raise ValueError(f"unsupported metrics schema {schema!r}")
        reader = csv.DictReader(lines[1:])
        rows = [{k: _parse(v) for k, v in r.items()} for r in reader]
        class_names = tuple(
            c.removeprefix("iou_") for c in reader.fieldnames if c.startswith("iou_")
        )
        return cls(class_names=class_names, rows=rows[:-1], aggregate=rows[-1])

    def summary_text(self) -> str:
        agg = self.aggregate
        lines = [f"images: {len(self.rows)}"]
        for key in ("mae", "psnr", "ssim", "ms_ssim", "miou"):
            lines.append(f"{key}: {_fmt(agg.get(key))}")
        for c in self.class_names:
            lines.append(f"iou[{c}]: {_fmt(agg.get(f'iou_{c}'))}")
        return "\n".join(lines) + "\n"


def build_report(
    upsampled: np.ndarray,
    hr: np.ndarray,
    pred_masks: np.ndarray,
    labels: np.ndarray,
    class_names: tuple,
    image_ids: list | None = None,
) -> MetricsReport:
    """Assemble a MetricsReport from batched images and predicted masks."""
    n = upsampled.shape[0]
    ids = image_ids or [str(i) for i in range(n)]
    report = MetricsReport(class_names=class_names)
    k = len(class_names)
    ms_ok = min(hr.shape[1], hr.shape[2]) >= MS_SSIM_MIN_SIZE
    for i in range(n):
        row = {
            "image_id": ids[i],
            "mae": mae(hr[i], upsampled[i]),
            "psnr": psnr(hr[i], upsampled[i]),
            "ssim": ssim(hr[i], upsampled[i]),
            "ms_ssim": ms_ssim(hr[i], upsampled[i]) if ms_ok else None,
        }
        per_class = [iou(pred_masks[i], labels[i], c) for c in range(k)]
        defined = [v for v in per_class if v is not None]
        row["miou"] = float(np.mean(defined)) if defined else None
        for c, name in enumerate(class_names):
            row[f"iou_{name}"] = per_class[c]
        report.rows.append(row)
    pooled = pooled_class_ious(list(pred_masks), list(labels), k)
    pooled_defined = [v for v in pooled if v is not None]
    agg = {
        "image_id": "aggregate",
        "mae": float(np.mean([r["mae"] for r in report.rows])),
        "psnr": float(np.mean([r["psnr"] for r in report.rows])),
        "ssim": float(np.mean([r["ssim"] for r in report.rows])),
        "ms_ssim": float(np.mean([r["ms_ssim"] for r in report.rows])) if ms_ok else None,
        "miou": float(np.mean(pooled_defined)) if pooled_defined else None,
    }
    for c, name in enumerate(class_names):
        agg[f"iou_{name}"] = pooled[c]
    report.aggregate = agg
    return report
