"""Central finite-difference verification of analytic gradients.

Runs on a tiny double-precision configuration (depth 2, base 4, 8x8 input,
batch 2 so BatchNorm uses real batch statistics) and compares autograd
parameter gradients of the generator and discriminator objectives against
central differences.
"""

from __future__ import annotations

from typing import Callable

import torch

from .losses import LossConfig, discriminator_loss, generator_total_loss
from .models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    discriminator_forward,
)

TINY_GENERATOR = GeneratorSpec(in_channels=1, out_channels=1, depth=2,
                               base_filters=4, max_filters=8, dropout_p=0.0)
TINY_DISCRIMINATOR = DiscriminatorSpec(in_channels=2, filter_schedule=(4, 8))


def finite_diff_grads(loss_fn: Callable[[], torch.Tensor],
                      params: list[torch.nn.Parameter], h: float = 1e-5) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gf = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                gf[i] = (lp - lm) / (2.0 * h)
            grads.append(g)
    return grads


def autograd_grads(loss_fn: Callable[[], torch.Tensor],
                   params: list[torch.nn.Parameter]) -> list[torch.Tensor]:
    for p in params:
        p.grad = None
    loss_fn().backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in params]


def max_rel_error(a: list[torch.Tensor], b: list[torch.Tensor], floor: float = 1e-6) -> float:
    worst = 0.0
    for ga, gb in zip(a, b):
        denom = torch.maximum(torch.maximum(ga.abs(), gb.abs()), torch.tensor(floor, dtype=ga.dtype))
        worst = max(worst, float(((ga - gb).abs() / denom).max()))
    return worst


def check_model_gradients(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative autograd-vs-finite-difference error for g_total and d_loss."""
    torch.manual_seed(seed)
    g = build_generator(TINY_GENERATOR, seed).double().train()
    d = build_discriminator(TINY_DISCRIMINATOR, seed + 1).double().train()
    rng = torch.Generator().manual_seed(seed + 2)
    x = torch.rand((2, 1, 8, 8), generator=rng, dtype=torch.float64) * 2 - 1
    y = torch.rand((2, 1, 8, 8), generator=rng, dtype=torch.float64) * 2 - 1
    cfg = LossConfig(lambda_l1=100.0)

    def g_loss() -> torch.Tensor:
        fake = g(x)
        d_fake = discriminator_forward(d, x, fake)
        total, _ = generator_total_loss(d_fake, fake, y, cfg)
        return total

    g_params = list(g.parameters())
    err_g = max_rel_error(autograd_grads(g_loss, g_params),
                          finite_diff_grads(g_loss, g_params, h=h))

    with torch.no_grad():
        fake_fixed = g(x).detach()

    def d_loss() -> torch.Tensor:
        return discriminator_loss(discriminator_forward(d, x, y),
                                  discriminator_forward(d, x, fake_fixed))

    d_params = list(d.parameters())
    err_d = max_rel_error(autograd_grads(d_loss, d_params),
                          finite_diff_grads(d_loss, d_params, h=h))
    return {"g_total_max_rel_err": err_g, "d_loss_max_rel_err": err_d}
