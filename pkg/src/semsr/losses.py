"""Generator and discriminator training objectives.

The GAN terms are computed in logits space with fused stable primitives
(softplus / logsigmoid); probabilities are never materialised and then
logged.  The weighted total keeps its per-term breakdown for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-3  # adversarial term
    beta: float = 5.0  # segmentation feature term
    gamma: float = 1e-3  # pixel MAE term

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    gan: torch.Tensor
    feat: torch.Tensor
    mae: torch.Tensor

    def floats(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "gan": float(self.gan.detach()),
            "feat": float(self.feat.detach()),
            "mae": float(self.mae.detach()),
        }


def mae_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel error, averaged over batch, space and channels."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def feature_loss(fx: torch.Tensor, fx_hat: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Distance between the two pre-threshold segmenter embeddings.

    ``l2`` is the squared Euclidean distance normalised by the embedding's
    own element count; ``bce`` treats the target embedding as soft labels.
    """
    if fx.shape != fx_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(fx.shape)} vs {tuple(fx_hat.shape)}")
    if kind == "l2":
        return ((fx - fx_hat) ** 2).mean()
    if kind == "bce":
        eps = 1e-7
        p = fx_hat.clamp(eps, 1 - eps)
        return -(fx * torch.log(p) + (1 - fx) * torch.log1p(-p)).mean()
    raise ValueError(f"unknown feature loss kind {kind!r}")


def gan_generator_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective -E[log D] over all patches."""
    return F.softplus(-logits_fake).mean()


def discriminator_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))], both patch-averaged."""
    return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()


def total_generator_loss(
    gan: torch.Tensor, feat: torch.Tensor, mae: torch.Tensor, weights: LossWeights
) -> LossBreakdown:
    total = weights.alpha * gan + weights.beta * feat + weights.gamma * mae
    return LossBreakdown(total=total, gan=gan, feat=feat, mae=mae)


def patch_accuracy(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> float:
    """Fraction of patches the discriminator classifies correctly."""
    with torch.no_grad():
        correct = (logits_real > 0).float().mean() + (logits_fake < 0).float().mean()
    return float(correct) / 2.0
