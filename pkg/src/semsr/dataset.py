"""Procedural synthetic aerial-style scenes with exact semantic masks.

Scenes are built from a fixed palette of six classes split between flat,
low-texture surfaces (ground, road, pool) and high-frequency textured
surfaces (striped roof, noise roof, foliage).  The textured classes are
deliberately colour-ambiguous with a flat class once their texture is
averaged away, so aggressive downsampling destroys exactly the evidence a
segmenter needs -- the property the rest of the pipeline is built to probe.

All randomness derives from ``numpy.random.default_rng(seed)``; a scene is
a pure function of its :class:`SceneSpec`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import ConfigError, DataError

SUPPORTED_SCALES = (4, 8, 16, 32)

CLASS_NAMES = ("ground", "road", "striped_roof", "noise_roof", "foliage", "pool")

# Classes whose appearance is carried by fine texture vs. flat colour.
TEXTURED_CLASSES = ("striped_roof", "noise_roof", "foliage")
FLAT_CLASSES = ("ground", "road", "pool")

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest"

_DEFAULT_TEXTURE_PARAMS = {
    # amplitude = half peak-to-peak contrast of the texture,
    # period/grain in high-resolution pixels.
    "striped_roof": {"amplitude": (0.14, 0.20), "period": (4, 8)},
    "noise_roof": {"amplitude": (0.14, 0.20), "grain": (1, 2)},
    "foliage": {"amplitude": (0.12, 0.18), "grain": (2, 4)},
}


def validate_scale(scale: int) -> int:
    if scale not in SUPPORTED_SCALES:
        raise ConfigError(f"unsupported scale {scale}; expected one of {SUPPORTED_SCALES}")
    return int(scale)


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one synthetic scene."""

    seed: int
    size: int = 256
    class_count: int = 6
    texture_params: dict = field(default_factory=lambda: dict(_DEFAULT_TEXTURE_PARAMS))

    def __post_init__(self):
        if self.size < 128 or (self.size & (self.size - 1)) != 0:
            raise ConfigError(f"scene size must be a power of two >= 128, got {self.size}")
        if self.size % max(SUPPORTED_SCALES) != 0:
            raise ConfigError(
                f"scene size {self.size} not divisible by max scale {max(SUPPORTED_SCALES)}"
            )
        if not 2 <= self.class_count <= len(CLASS_NAMES):
            raise ConfigError(
                f"class_count must be in [2, {len(CLASS_NAMES)}], got {self.class_count}"
            )


def _value_noise(rng: np.random.Generator, h: int, w: int, grid: int) -> np.ndarray:
    """Smooth value noise in [0,1] with features of roughly `grid` pixels."""
    gh, gw = h // grid + 2, w // grid + 2
    g = rng.random((gh, gw))
    y = np.arange(h)[:, None] / grid
    x = np.arange(w)[None, :] / grid
    yi, xi = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - yi, x - xi
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    n0 = g[yi, xi] * (1 - fx) + g[yi, xi + 1] * fx
    n1 = g[yi + 1, xi] * (1 - fx) + g[yi + 1, xi + 1] * fx
    return n0 * (1 - fy) + n1 * fy


def _paint(img: np.ndarray, mask: np.ndarray, color: Sequence[float]) -> None:
    img[mask] = np.asarray(color, dtype=np.float64)


def _blob_mask(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    """Organic blob: union of a handful of random disks around one centre."""
    cy, cx = rng.uniform(0.1 * size, 0.9 * size, 2)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(3, 9))):
        r = rng.uniform(size * 0.05, size * 0.14)
        oy, ox = rng.uniform(-r, r, 2)
        mask |= (yy - (cy + oy)) ** 2 + (xx - (cx + ox)) ** 2 < r * r
    return mask


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene.

    Returns
    -------
    image : (S, S, 3) float32 in [0, 1]
    labels : (S, S) uint8 class indices, exact by construction
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    k = spec.class_count
    tp = spec.texture_params

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.zeros((s, s, 3), dtype=np.float64)
    labels = np.zeros((s, s), dtype=np.uint8)

    # -- ground: muted grass green, gentle low-frequency mottling only
    ground_base = np.array([0.42, 0.50, 0.34]) + rng.uniform(-0.03, 0.03, 3)
    low = _value_noise(rng, s, s, grid=s // 4)[..., None]
    img[:] = ground_base + (low - 0.5) * 0.05

    road_gray = 0.33 + rng.uniform(-0.02, 0.02)

    # -- roads: straight flat bands, mid-dark gray
    if k > 1:
        for _ in range(int(rng.integers(1, 3))):
            theta = math.radians(float(rng.choice([0.0, 90.0, rng.uniform(20, 70)])))
            proj = xx * math.cos(theta) + yy * math.sin(theta)
            center = rng.uniform(proj.min(), proj.max())
            width = rng.uniform(12, 20)
            band = np.abs(proj - center) < width / 2
            _paint(img, band, (road_gray - 0.03, road_gray - 0.03, road_gray - 0.01))
            labels[band] = 1

    # -- buildings: rectangles, striped or speckled roofs whose mean colour
    #    matches road gray so blurring collapses them onto the road class
    if k > 2:
        for b in range(int(rng.integers(3, 8))):
            bh, bw = rng.integers(s // 8, s // 3, 2)
            y0 = int(rng.integers(0, s - bh))
            x0 = int(rng.integers(0, s - bw))
            rect = np.zeros((s, s), dtype=bool)
            rect[y0 : y0 + bh, x0 : x0 + bw] = True
            tint = rng.uniform(-0.015, 0.015, 3)
            if k > 3 and b % 2 == 1:
                # noise roof: isotropic speckle at 1-2 px grain
                amp = rng.uniform(*tp["noise_roof"]["amplitude"])
                grain = int(rng.integers(tp["noise_roof"]["grain"][0], tp["noise_roof"]["grain"][1] + 1))
                speckle = rng.random((s // grain + 1, s // grain + 1))
                speckle = np.kron(speckle, np.ones((grain, grain)))[:s, :s]
                tex = road_gray + (speckle - 0.5) * 2 * amp
                img[rect] = (tex[rect, None] + tint).clip(0.02, 0.98)
                labels[rect] = 3
            else:
                # striped roof: oriented square wave
                amp = rng.uniform(*tp["striped_roof"]["amplitude"])
                period = int(rng.integers(tp["striped_roof"]["period"][0], tp["striped_roof"]["period"][1] + 1))
                horizontal = bool(rng.integers(0, 2))
                coord = yy if horizontal else xx
                phase = int(rng.integers(0, period))
                stripes = ((coord.astype(int) + phase) // max(period // 2, 1)) % 2
                tex = road_gray + (stripes - 0.5) * 2 * amp
                img[rect] = (tex[rect, None] + tint).clip(0.02, 0.98)
                labels[rect] = 2

    # -- foliage: organic blobs of green speckle whose mean matches ground
    if k > 4:
        for _ in range(int(rng.integers(2, 6))):
            blob = _blob_mask(rng, s, yy, xx)
            amp = rng.uniform(*tp["foliage"]["amplitude"])
            grain = int(rng.integers(tp["foliage"]["grain"][0], tp["foliage"]["grain"][1] + 1))
            speckle = rng.random((s // grain + 1, s // grain + 1))
            speckle = np.kron(speckle, np.ones((grain, grain)))[:s, :s]
            mottle = (speckle - 0.5) * 2 * amp
            tex = ground_base[None, :] + mottle[..., None] * np.array([0.8, 1.0, 0.6])
            img[blob] = tex[blob].clip(0.02, 0.98)
            labels[blob] = 4

    # -- pools: flat saturated blue ellipses, unambiguous at any blur
    if k > 5:
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.1 * s, 0.9 * s, 2)
            ry, rx = rng.uniform(8, 20, 2)
            ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
            ripple = _value_noise(rng, s, s, grid=6)
            pool = np.stack(
                [0.16 + ripple * 0.02, 0.45 + ripple * 0.03, 0.74 + ripple * 0.03], axis=-1
            )
            img[ellipse] = pool[ellipse]
            labels[ellipse] = 5

    # faint sensor noise everywhere, well below any texture amplitude
    img += rng.normal(0.0, 0.004, img.shape)

    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum sampled Gaussian with radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with the align-corners=false convention, edge clamped."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Public bilinear resampler (float64 internally, clipped to [0,1])."""
    out = _bilinear_resize(np.asarray(img, dtype=np.float64), out_h, out_w)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Gaussian anti-alias filter followed by bilinear downsampling.

    sigma = scale/2, kernel radius ceil(3*sigma), reflective padding
    (edge sample repeated).  Accepts (H, W, C) or batched (B, H, W, C).
    """
    validate_scale(scale)
    hr = np.asarray(hr)
    if hr.ndim == 4:
        return np.stack([degrade(t, scale) for t in hr])
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ConfigError(f"image dims {h}x{w} not divisible by scale {scale}")
    k = gaussian_kernel(scale / 2.0)
    blurred = hr.astype(np.float64)
    blurred = correlate1d(blurred, k, axis=0, mode="reflect")
    blurred = correlate1d(blurred, k, axis=1, mode="reflect")
    out = _bilinear_resize(blurred, h // scale, w // scale)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def nn_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    """Replicate every source pixel into a scale x scale block."""
    validate_scale(scale)
    lr = np.asarray(lr)
    axes = (1, 2) if lr.ndim == 4 else (0, 1)
    out = np.repeat(np.repeat(lr, scale, axis=axes[0]), scale, axis=axes[1])
    return out


@dataclass
class TileRecord:
    seed: int
    split: str
    hr: str
    mask: str
    lr: dict  # scale (as str in manifest) -> relative path


@dataclass
class DatasetManifest:
    """Index of a built dataset; all paths relative to root."""

    root: Path
    size: int
    class_count: int
    class_names: tuple
    scales: tuple
    records: dict  # split -> list[TileRecord]

    def split_records(self, split: str) -> list:
        if split not in self.records:
            raise DataError(f"unknown split {split!r}; have {sorted(self.records)}")
        return self.records[split]

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        header = {
            "version": MANIFEST_VERSION,
            "size": self.size,
            "class_count": self.class_count,
            "class_names": list(self.class_names),
            "scales": list(self.scales),
        }
        lines = [json.dumps({"header": header}, sort_keys=True)]
        for split in sorted(self.records):
            for rec in self.records[split]:
                lines.append(json.dumps({"tile": asdict(rec)}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"no manifest at {path}")
        records: dict = {}
        header = None
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                rec = TileRecord(**obj["tile"])
                records.setdefault(rec.split, []).append(rec)
        if header is None:
            raise DataError(f"manifest {path} has no header line")
        if header["version"] != MANIFEST_VERSION:
            raise DataError(
                f"manifest version {header['version']} unsupported (want {MANIFEST_VERSION})"
            )
        return cls(
            root=root,
            size=header["size"],
            class_count=header["class_count"],
            class_names=tuple(header["class_names"]),
            scales=tuple(header["scales"]),
            records=records,
        )


def _save_rgb(path: Path, img: np.ndarray) -> None:
    u8 = np.clip(np.asarray(img, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(u8, "RGB").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), "L").save(path)


def load_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing tile file {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing tile file {path}")
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


def split_seeds(seeds: Sequence[int], splits: dict) -> dict:
    """Deterministically partition seeds by the given train/val/test fractions."""
    fractions = {k: float(v) for k, v in splits.items()}
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    seeds = list(seeds)
    n = len(seeds)
    n_train = int(round(n * fractions.get("train", 0.0)))
    n_val = int(round(n * fractions.get("val", 0.0)))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": seeds[:n_train],
        "val": seeds[n_train : n_train + n_val],
        "test": seeds[n_train + n_val :],
    }


def build_dataset(
    root,
    seeds: Sequence[int],
    scales: Iterable[int],
    splits: dict | None = None,
    size: int = 256,
    class_count: int = 6,
    texture_params: dict | None = None,
) -> DatasetManifest:
    """Generate scenes, write hr/lr/mask tiles and the manifest.

    Layout: ``root/{train,val,test}/{hr,lr{s},mask}/tile_{seed}.png`` with the
    manifest at ``root/manifest``.  Rebuilding with identical inputs rewrites
    identical content.
    """
    root = Path(root)
    scales = tuple(validate_scale(s) for s in scales)
    splits = splits or {"train": 0.8, "val": 0.1, "test": 0.1}
    by_split = split_seeds(seeds, splits)

    tp = texture_params or dict(_DEFAULT_TEXTURE_PARAMS)
    records: dict = {k: [] for k in by_split}
    try:
        for split, split_seed_list in by_split.items():
            dirs = {"hr": root / split / "hr", "mask": root / split / "mask"}
            for s in scales:
                dirs[f"lr{s}"] = root / split / f"lr{s}"
            for d in dirs.values():
                d.mkdir(parents=True, exist_ok=True)
            for seed in split_seed_list:
                spec = SceneSpec(seed=seed, size=size, class_count=class_count, texture_params=tp)
                img, mask = generate_scene(spec)
                name = f"tile_{seed}.png"
                _save_rgb(dirs["hr"] / name, img)
                _save_mask(dirs["mask"] / name, mask)
                lr_paths = {}
                for s in scales:
                    _save_rgb(dirs[f"lr{s}"] / name, degrade(img, s))
                    lr_paths[str(s)] = f"{split}/lr{s}/{name}"
                records[split].append(
                    TileRecord(
                        seed=seed,
                        split=split,
                        hr=f"{split}/hr/{name}",
                        mask=f"{split}/mask/{name}",
                        lr=lr_paths,
                    )
                )
    except OSError as exc:
        raise DataError(f"dataset build failed under {root}: {exc}") from exc

    manifest = DatasetManifest(
        root=root,
        size=size,
        class_count=class_count,
        class_names=CLASS_NAMES[:class_count],
        scales=scales,
        records=records,
    )
    manifest.save()
    return manifest


def load_batch(
    manifest: DatasetManifest,
    split: str,
    indices: Sequence[int],
    scale: int | None = None,
) -> dict:
    """Load a batch of tiles as stacked arrays.

    Returns dict with ``hr`` (B,S,S,3), ``lr`` (B,S/s,S/s,3), ``labels`` (B,S,S)
    and ``seeds``.  ``scale`` may be omitted when the dataset holds one scale.
    """
    if len(indices) == 0:
        raise DataError("empty index list")
    if scale is None:
        if len(manifest.scales) != 1:
            raise ConfigError(f"dataset has scales {manifest.scales}; pass scale explicitly")
        scale = manifest.scales[0]
    if scale not in manifest.scales:
        raise ConfigError(f"scale {scale} not in dataset scales {manifest.scales}")
    recs = manifest.split_records(split)
    n = len(recs)
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise DataError(f"indices {bad} out of range for split {split!r} of size {n}")
    hr, lr, labels, seeds = [], [], [], []
    root = Path(manifest.root)
    for i in indices:
        rec = recs[i]
        hr.append(load_rgb(root / rec.hr))
        lr.append(load_rgb(root / rec.lr[str(scale)]))
        labels.append(load_mask(root / rec.mask))
        seeds.append(rec.seed)
    return {
        "hr": np.stack(hr),
        "lr": np.stack(lr),
        "labels": np.stack(labels).astype(np.int64),
        "seeds": np.asarray(seeds),
        "scale": scale,
    }
