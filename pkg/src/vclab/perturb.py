"""Adversarial feature-statistic style perturbation.

Speaker style is modeled as per-channel mean/std over the frames of one
instance. Style transfer is statistic replacement:

    x' = sigma_t * (x - mu(x)) / sigma(x) + mu_t

Training-time augmentation samples new statistics per instance from
Gaussians centered on the instance's own statistics, with per-channel
spreads derived from the batch:

    step 1-4   per-instance stats + normalization
    step 5     Sigma_mu, Sigma_sigma = std of stats across the batch
    step 6-7   perturbed spreads from learnable per-channel magnitudes
    step 8-11  sample (mu_t, sigma_t) per instance, re-style

A gradient reversal node sits on the perturbed-spread path, so the
magnitudes ascend the downstream loss while the encoder descends it.

The published step-7 formula, read literally, is I / (I * Sigma), which
cancels the learnable magnitude and reduces to 1/Sigma; it is kept as the
``literal`` mode for ablation. The default ``learned-scale`` mode uses
``softplus(I) * Sigma`` (initialized so softplus(I) = 1), which preserves
the batch-dependent spread and gives the reversal node a live parameter.
``fixed`` mode uses the raw batch spread.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

# Stabilizer inside sqrt(var + eps^2). Must satisfy eps^2 << SIGMA_MIN^2 so
# that re-normalizing a perturbed instance whose sampled scale sits at the
# floor still recovers the normalized content to well under 1e-4.
EPS_STATS = 1e-6
SIGMA_MIN = 1e-3
MODES = ("literal", "learned-scale", "fixed")

# softplus(x) = 1  <=>  x = ln(e - 1)
_UNIT_SOFTPLUS_INV = math.log(math.e - 1.0)


class ChannelStats(NamedTuple):
    mu: torch.Tensor     # (..., C)
    sigma: torch.Tensor  # (..., C), >= eps


class BatchSpread(NamedTuple):
    mu: torch.Tensor     # (C,)
    sigma: torch.Tensor  # (C,)


def channel_stats(x: torch.Tensor, eps: float = EPS_STATS) -> ChannelStats:
    """Per-channel mean and eps-stabilized population std over frames.

    Args:
        x: (W, C) or (B, W, C) tensor with W >= 2.
        eps: added as eps**2 inside the square root, so sigma >= eps.
    """
    if x.shape[-2] < 2:
        raise ValueError(f"need at least 2 frames, got {x.shape[-2]}")
    mu = x.mean(dim=-2)
    var = x.var(dim=-2, unbiased=False)
    sigma = torch.sqrt(var + eps * eps)
    return ChannelStats(mu, sigma)


def instance_normalize(
    x: torch.Tensor, stats: ChannelStats | None = None, eps: float = EPS_STATS
) -> torch.Tensor:
    """Standardize each channel over frames using instance statistics."""
    if stats is None:
        stats = channel_stats(x, eps=eps)
    if stats.mu.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"stats have {stats.mu.shape[-1]} channels, input has {x.shape[-1]}"
        )
    return (x - stats.mu.unsqueeze(-2)) / stats.sigma.unsqueeze(-2)


def batch_stat_spread(stats: ChannelStats) -> BatchSpread:
    """Population std of per-instance stats across the batch (B >= 2)."""
    mu, sigma = stats
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise ValueError("batch spread needs stacked stats from B >= 2 instances")
    return BatchSpread(
        mu.std(dim=0, unbiased=False), sigma.std(dim=0, unbiased=False)
    )


def perturbed_spread(
    i_mag: torch.Tensor,
    spread: torch.Tensor,
    mode: str = "learned-scale",
    literal_cap: float = 10.0,
) -> torch.Tensor:
    """Perturbed per-channel spread from learnable magnitudes.

    ``literal``: I / (I * spread), guarded to ``literal_cap`` where the
    denominator vanishes. ``learned-scale``: softplus(I) * spread.
    ``fixed``: spread unchanged.
    """
    if mode == "learned-scale":
        return nn.functional.softplus(i_mag) * spread
    if mode == "literal":
        denom = i_mag * spread
        zero = denom == 0
        safe = i_mag / torch.where(zero, torch.ones_like(denom), denom)
        return torch.where(zero, torch.full_like(spread, literal_cap), safe)
    if mode == "fixed":
        return spread
    raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")


def sample_stats(
    stats: ChannelStats,
    spread: BatchSpread,
    generator: torch.Generator | None = None,
    sigma_min: float = SIGMA_MIN,
) -> ChannelStats:
    """Sample replacement statistics around the instance's own.

    mu_t ~ N(mu, spread.mu), sigma_t ~ N(sigma, spread.sigma) clamped to
    ``sigma_min`` so channels never collapse or flip.
    """
    mu, sigma = stats
    z1 = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z2 = torch.randn(sigma.shape, generator=generator, dtype=sigma.dtype)
    mu_t = mu + spread.mu * z1
    sigma_t = torch.clamp(sigma + spread.sigma * z2, min=sigma_min)
    return ChannelStats(mu_t, sigma_t)


def style_transform(
    x_n: torch.Tensor, mu_t: torch.Tensor, sigma_t: torch.Tensor
) -> torch.Tensor:
    """Re-style a normalized instance: x' = x_n * sigma_t + mu_t."""
    if mu_t.shape[-1] != x_n.shape[-1] or sigma_t.shape[-1] != x_n.shape[-1]:
        raise ValueError("channel count mismatch between input and statistics")
    return x_n * sigma_t.unsqueeze(-2) + mu_t.unsqueeze(-2)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Gradient reversal: identity forward, gradients scaled by -lam."""
    if lam <= 0:
        raise ValueError(f"grl lambda must be positive, got {lam}")
    return _ReverseGrad.apply(x, float(lam))


class StylePerturb(nn.Module):
    """Batch-level statistic perturbation with adversarial magnitudes.

    Training-only: the module must be in train mode and see batches of at
    least two instances (the spread is undefined otherwise). Inference
    pipelines bypass it entirely.
    """

    def __init__(
        self,
        channels: int,
        mode: str = "learned-scale",
        grl_lambda: float = 1.0,
        eps: float = EPS_STATS,
        sigma_min: float = SIGMA_MIN,
        literal_cap: float = 10.0,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        if mode != "fixed" and grl_lambda <= 0:
            raise ValueError("grl_lambda must be positive for learnable modes")
        self.mode = mode
        self.grl_lambda = grl_lambda
        self.eps = eps
        self.sigma_min = sigma_min
        self.literal_cap = literal_cap
        init = _UNIT_SOFTPLUS_INV if mode == "learned-scale" else 1.0
        self.mag_mu = nn.Parameter(torch.full((channels,), init))
        self.mag_sigma = nn.Parameter(torch.full((channels,), init))

    def forward(
        self, batch: torch.Tensor, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        """Perturb a (B, W, C) batch; statistics sampled per instance."""
        if not self.training:
            raise RuntimeError("style perturbation is a training-only transform")
        if batch.ndim != 3:
            raise ValueError(f"expected (B, W, C) batch, got shape {tuple(batch.shape)}")
        if batch.shape[0] < 2:
            raise ValueError("style perturbation needs a batch of at least 2")
        stats = channel_stats(batch, eps=self.eps)
        x_n = instance_normalize(batch, stats)
        spread = batch_stat_spread(stats)
        p_mu = perturbed_spread(
            self.mag_mu.to(batch.dtype), spread.mu, self.mode, self.literal_cap
        )
        p_sigma = perturbed_spread(
            self.mag_sigma.to(batch.dtype), spread.sigma, self.mode, self.literal_cap
        )
        if self.mode != "fixed":
            p_mu = grl(p_mu, self.grl_lambda)
            p_sigma = grl(p_sigma, self.grl_lambda)
        sampled = sample_stats(
            stats, BatchSpread(p_mu, p_sigma), generator, self.sigma_min
        )
        return style_transform(x_n, sampled.mu, sampled.sigma)
