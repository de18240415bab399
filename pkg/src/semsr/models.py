"""The three networks: generator G, conditional patch discriminator D, segmenter F.

G is a shrunk residual-in-residual dense network operating at low resolution
with nearest-neighbour + conv upsampling stages (one per factor of two).
D is fully convolutional, judges (image | nearest-neighbour upsampled input)
pairs over spatial patches, and carries power-iteration spectral
normalisation on every conv kernel.  F is a compact U-Net emitting per-pixel
softmax probabilities; it is trained once, then frozen.

Tensors here are torch NCHW; `to_tensor`/`to_numpy` convert from and to the
channels-last numpy arrays used by the dataset and metrics layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

SN_EPS = 1e-12


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """(B,H,W,C) or (H,W,C) float numpy -> float32 NCHW tensor."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> (B,H,W,C) float32 numpy."""
    return t.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy()


# ---------------------------------------------------------------------------
# spectral normalisation
# ---------------------------------------------------------------------------


SN_BLOCK = 16


def _orthonormalize(m: torch.Tensor) -> torch.Tensor:
    if m.ndim == 1:
        return m / (m.norm() + SN_EPS)
    q, _ = torch.linalg.qr(m)
    return q


def _power_iterate(w: torch.Tensor, u: torch.Tensor, n_iters: int):
    """n_iters rounds of (block) power iteration; returns updated (u, v)."""
    v = None
    for _ in range(max(n_iters, 1)):
        v = _orthonormalize(w.t() @ u)
        u = _orthonormalize(w @ v)
    return u, v


def _sigma_estimate(w: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Largest-singular-value estimate from the iterated subspace.

    For a single vector this is the classic u^T W v; for a block it is the
    top Ritz value, evaluated so gradients flow through W only.
    """
    if u.ndim == 1:
        return u @ (w @ v)
    with torch.no_grad():
        b = u.t() @ w @ v
        us, _, vs = torch.linalg.svd(b)
        u_top = u @ us[:, 0]
        v_top = v @ vs[0, :]
    return u_top @ (w @ v_top)


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_iters: int = 1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide `weight` by its power-iteration largest-singular-value estimate.

    The kernel is flattened to (out_channels, rest).  `u` holds the
    persistent left singular subspace estimate: a unit vector, or an
    orthonormal (out_channels, block) matrix for simultaneous iteration
    (a single vector stalls near the tight singular-value cluster of a
    freshly initialised kernel; a modest block converges decisively).
    The advanced estimate is returned so callers can carry it across steps.
    A zero matrix is returned unchanged (the estimate is floored at 1e-12).
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u, v = _power_iterate(w, u, n_iters)
    sigma = torch.clamp(_sigma_estimate(w, u, v), min=SN_EPS)
    if float(sigma) <= SN_EPS:
        return weight, u
    return weight / sigma, u


class SpectralConv2d(nn.Module):
    """Conv2d whose kernel is spectrally normalised at every forward pass.

    The power iteration advances only inside `advance_power_iteration`, so
    the training loop controls exactly how often the estimate moves (once
    per discriminator step); forward passes reuse the stored subspace.
    """

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding, bias=bias)
        block = min(SN_BLOCK, out_ch)
        self.register_buffer("weight_u", _orthonormalize(torch.randn(out_ch, block)))

    @torch.no_grad()
    def advance_power_iteration(self, n_iters: int = 1) -> None:
        w = self.conv.weight.reshape(self.conv.weight.shape[0], -1)
        u, _ = _power_iterate(w, self.weight_u, n_iters)
        self.weight_u.copy_(u)

    def normalized_weight(self) -> torch.Tensor:
        w = self.conv.weight.reshape(self.conv.weight.shape[0], -1)
        with torch.no_grad():
            v = _orthonormalize(w.t() @ self.weight_u)
        sigma = torch.clamp(_sigma_estimate(w, self.weight_u, v), min=SN_EPS)
        return self.conv.weight / sigma

    def forward(self, x):
        return F.conv2d(
            x,
            self.normalized_weight(),
            self.conv.bias,
            self.conv.stride,
            self.conv.padding,
        )


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    scale: int = 4
    rrdb_count: int = 3
    dense_blocks: int = 3
    base_channels: int = 32
    growth_channels: int = 16
    residual_scale: float = 0.2

    def __post_init__(self):
        if self.scale & (self.scale - 1) or self.scale < 2:
            raise ShapeError(f"generator scale must be a power of two >= 2, got {self.scale}")

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.scale))


class DenseBlock(nn.Module):
    """Five-conv dense block; output is the residual scaled and added back."""

    def __init__(self, nf: int, gc: int, residual_scale: float):
        super().__init__()
        self.residual_scale = residual_scale
        self.convs = nn.ModuleList(
            [nn.Conv2d(nf + i * gc, gc, 3, 1, 1) for i in range(4)]
            + [nn.Conv2d(nf + 4 * gc, nf, 3, 1, 1)]
        )

    def forward(self, x):
        feats = [x]
        for conv in self.convs[:-1]:
            feats.append(F.leaky_relu(conv(torch.cat(feats, dim=1)), 0.2))
        out = self.convs[-1](torch.cat(feats, dim=1))
        return x + self.residual_scale * out


class RRDB(nn.Module):
    def __init__(self, nf: int, gc: int, dense_blocks: int, residual_scale: float):
        super().__init__()
        self.blocks = nn.Sequential(
            *[DenseBlock(nf, gc, residual_scale) for _ in range(dense_blocks)]
        )
        self.residual_scale = residual_scale

    def forward(self, x):
        return x + self.residual_scale * self.blocks(x)


class Generator(nn.Module):
    """RRDN-style super-resolution generator, sigmoid-bounded to [0,1]."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        nf, gc = cfg.base_channels, cfg.growth_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.body = nn.Sequential(
            *[RRDB(nf, gc, cfg.dense_blocks, cfg.residual_scale) for _ in range(cfg.rrdb_count)]
        )
        self.trunk_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.upsample = nn.ModuleList(
            [nn.Conv2d(nf, nf, 3, 1, 1) for _ in range(cfg.upsample_stages)]
        )
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)

    def base_path(self, x: torch.Tensor) -> torch.Tensor:
        """The network with all residual branches removed: first conv,
        upsampling stack, and output head only."""
        feat = self.conv_first(x)
        for conv in self.upsample:
            feat = F.leaky_relu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")), 0.2)
        return torch.sigmoid(self.conv_last(F.leaky_relu(self.conv_hr(feat), 0.2)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"generator expects (B,3,H,W), got {tuple(x.shape)}")
        if min(x.shape[2], x.shape[3]) < 8:
            raise ShapeError(f"generator input must be at least 8x8, got {tuple(x.shape)}")
        feat = self.conv_first(x)
        feat = feat + self.trunk_conv(self.body(feat))
        for conv in self.upsample:
            feat = F.leaky_relu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")), 0.2)
        return torch.sigmoid(self.conv_last(F.leaky_relu(self.conv_hr(feat), 0.2)))


def transfer_generator(gen_lo: Generator, cfg_hi: GeneratorConfig) -> Generator:
    """Initialise a higher-scale generator from a lower-scale one.

    Every tensor whose name exists in both models is copied verbatim; the
    additional upsampling stage(s) keep their fresh initialisation.  The
    configs must agree on everything except scale.
    """
    lo, hi = gen_lo.cfg, cfg_hi
    mismatched = [
        f
        for f in ("rrdb_count", "dense_blocks", "base_channels", "growth_channels", "residual_scale")
        if getattr(lo, f) != getattr(hi, f)
    ]
    if mismatched:
        raise ShapeError(f"incompatible generator configs; differing fields: {mismatched}")
    if hi.scale <= lo.scale:
        raise ShapeError(f"target scale {hi.scale} must exceed source scale {lo.scale}")
    gen_hi = Generator(hi)
    src = gen_lo.state_dict()
    dst = gen_hi.state_dict()
    bad = [k for k in src if k in dst and dst[k].shape != src[k].shape]
    if bad:
        raise ShapeError(f"incompatible tensors during transfer: {bad}")
    with torch.no_grad():
        for k, v in src.items():
            if k in dst:
                dst[k].copy_(v)
    return gen_hi


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorConfig:
    stage_channels: tuple = (64, 128, 256, 512)
    leaky_slope: float = 0.2
    input_channels: int = 6

    @property
    def stride_product(self) -> int:
        return 2 ** len(self.stage_channels)


class Discriminator(nn.Module):
    """Patch discriminator conditioned on the upsampled low-res input.

    Each stage is two stacked 3x3 conv + batchnorm layers with LeakyReLU,
    the first conv downsampling by stride 2; the head is a single 1x1 conv
    producing one logit per patch.  Every conv kernel (head included) is
    spectrally normalised.
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        layers: list[nn.Module] = []
        c_in = self.cfg.input_channels
        for c_out in self.cfg.stage_channels:
            layers += [
                SpectralConv2d(c_in, c_out, 3, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(self.cfg.leaky_slope),
                SpectralConv2d(c_out, c_out, 3, stride=1, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(self.cfg.leaky_slope),
            ]
            c_in = c_out
        layers.append(SpectralConv2d(c_in, 1, 1))
        self.net = nn.Sequential(*layers)

    def spectral_convs(self) -> list[SpectralConv2d]:
        return [m for m in self.modules() if isinstance(m, SpectralConv2d)]

    def advance_power_iteration(self, n_iters: int = 1) -> None:
        for m in self.spectral_convs():
            m.advance_power_iteration(n_iters)

    def forward(self, img: torch.Tensor, x_nn: torch.Tensor) -> torch.Tensor:
        if img.shape != x_nn.shape:
            raise ShapeError(f"image/conditioning shape mismatch: {tuple(img.shape)} vs {tuple(x_nn.shape)}")
        if min(img.shape[2], img.shape[3]) < self.cfg.stride_product:
            raise ShapeError(
                f"discriminator input {tuple(img.shape[2:])} below minimum "
                f"{self.cfg.stride_product}"
            )
        return self.net(torch.cat([img, x_nn], dim=1))


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmenterConfig:
    class_count: int = 6
    encoder_channels: tuple = (16, 32, 64)

    @property
    def stride_product(self) -> int:
        return 2 ** len(self.encoder_channels)


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, 1, 1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, 1, 1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Segmenter(nn.Module):
    """Compact U-Net; outputs per-pixel softmax probabilities (B,K,H,W)."""

    def __init__(self, cfg: SegmenterConfig | None = None):
        super().__init__()
        self.cfg = cfg or SegmenterConfig()
        chans = self.cfg.encoder_channels
        self.enc = nn.ModuleList()
        c_in = 3
        for c in chans:
            self.enc.append(_double_conv(c_in, c))
            c_in = c
        self.bottleneck = _double_conv(chans[-1], chans[-1] * 2)
        self.dec = nn.ModuleList()
        c_in = chans[-1] * 2
        for c in reversed(chans):
            self.dec.append(_double_conv(c_in + c, c))
            c_in = c
        self.head = nn.Conv2d(chans[0], self.cfg.class_count, 1)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        sp = self.cfg.stride_product
        if x.shape[2] % sp or x.shape[3] % sp:
            raise ShapeError(
                f"segmenter input dims {tuple(x.shape[2:])} must be divisible by {sp}"
            )
        skips = []
        feat = x
        for enc in self.enc:
            feat = enc(feat)
            skips.append(feat)
            feat = F.max_pool2d(feat, 2)
        feat = self.bottleneck(feat)
        for dec, skip in zip(self.dec, reversed(skips)):
            feat = F.interpolate(feat, scale_factor=2, mode="nearest")
            feat = dec(torch.cat([feat, skip], dim=1))
        return self.head(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward_logits(x), dim=1)

    def freeze(self) -> "Segmenter":
        """Stop parameter updates; gradients still flow through to inputs."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def segment_labels(segmenter: Segmenter, images_hwc: np.ndarray, batch: int = 4) -> np.ndarray:
    """Run F on channels-last images and argmax to label masks."""
    segmenter.eval()
    out = []
    with torch.no_grad():
        for i in range(0, images_hwc.shape[0], batch):
            probs = segmenter(to_tensor(images_hwc[i : i + batch]))
            out.append(np.argmax(to_numpy(probs), axis=-1).astype(np.uint8))
    return np.concatenate(out)


def upscale(generator: Generator, lr_hwc: np.ndarray, batch: int = 4) -> np.ndarray:
    """Super-resolve channels-last low-res images in eval mode."""
    generator.eval()
    out = []
    with torch.no_grad():
        for i in range(0, lr_hwc.shape[0], batch):
            out.append(to_numpy(generator(to_tensor(lr_hwc[i : i + batch]))))
    return np.concatenate(out)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the module's state dict, order-independent."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(module.state_dict()):
        t = module.state_dict()[name]
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
