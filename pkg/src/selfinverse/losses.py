"""cGAN + L1 losses and their composition for the bidirectional objective.

The generator uses the non-saturating form -log D(fake) rather than the
saturating +log(1 - D(fake)); probabilities are clamped to [eps, 1-eps]
before any log.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7

GAN_MODES = ("bce",)
GAN_FORMS = ("non_saturating",)


@dataclass(frozen=True)
class LossConfig:
    lambda_l1: float = 100.0
    gan_mode: str = "bce"
    generator_gan_form: str = "non_saturating"

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"unsupported gan_mode {self.gan_mode!r}")
        if self.generator_gan_form not in GAN_FORMS:
            raise ValueError(f"unsupported generator_gan_form {self.generator_gan_form!r}")


@dataclass
class LossBreakdown:
    """One step's loss components; g_total = g_gan_loss + lambda_l1 * g_l1_loss."""

    g_gan_loss: float
    g_l1_loss: float
    g_total: float
    d_loss: float = float("nan")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake)))."""
    return -torch.log(_clamp(d_real)).mean() - torch.log(1.0 - _clamp(d_fake)).mean()


def generator_gan_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term, -mean(log D(fake))."""
    return -torch.log(_clamp(d_fake)).mean()


def generator_total_loss(d_fake: torch.Tensor, pred: torch.Tensor, target: torch.Tensor,
                         cfg: LossConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """Combined generator objective; returns the differentiable total and its parts."""
    gan = generator_gan_loss(d_fake)
    l1 = l1_loss(pred, target)
    total = gan + cfg.lambda_l1 * l1
    return total, LossBreakdown(
        g_gan_loss=float(gan.detach()),
        g_l1_loss=float(l1.detach()),
        g_total=float(gan.detach()) + cfg.lambda_l1 * float(l1.detach()),
    )
