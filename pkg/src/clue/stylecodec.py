"""Style posterior, reparameterized sampling, KL term and prior draws."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import CrossAttention, DenoiserConfig, ResBlock
from .errors import ConfigurationError, DimensionError, NumericError

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -10.0, 10.0


@dataclass
class StylePosterior:
    """Diagonal Gaussian over style latents, batched along dim 0.

    The scale is stored as log sigma, clamped to [-10, 10].
    """

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise DimensionError(
                f"mu {tuple(self.mu.shape)} and log_sigma {tuple(self.log_sigma.shape)} differ"
            )
        self.log_sigma = self.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    @property
    def d_style(self) -> int:
        return self.mu.shape[-1]


class StyleEncoder(nn.Module):
    """Downsampling conv encoder with prompt cross-attention and one FC head.

    The trunk mirrors the denoiser's encoder half at half width, without the
    timestep path (it only ever sees clean images). The head reads the
    flattened final feature map and emits ``2 * d_style`` values, split into
    mean and log-scale. It starts at zero, so a fresh encoder returns the
    standard normal for every input.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = tuple(max(cfg.groups, c // 2) for c in cfg.channels)
        heads = cfg.heads if all(w % cfg.heads == 0 for w in widths) else 1
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.res.append(ResBlock(prev, w, None, cfg.groups))
            self.attn.append(CrossAttention(w, cfg.d_cond, heads))
            if i < len(widths) - 1:
                self.down.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        side = cfg.resolution // 2 ** (len(widths) - 1)
        self.norm_out = nn.GroupNorm(min(cfg.groups, prev), prev)
        self.head = nn.Linear(prev * side * side, 2 * cfg.d_style)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x0: torch.Tensor, c: torch.Tensor) -> StylePosterior:
        h = self.conv_in(x0)
        for i, (res, attn) in enumerate(zip(self.res, self.attn)):
            h = res(h)
            b, ch, hh, ww = h.shape
            tokens = attn(h.flatten(2).transpose(1, 2), c)
            h = tokens.transpose(1, 2).reshape(b, ch, hh, ww)
            if i < len(self.down):
                h = self.down[i](h)
        out = self.head(F.silu(self.norm_out(h)).flatten(1))
        mu, log_sigma = out.chunk(2, dim=-1)
        return StylePosterior(mu, log_sigma)


def encode(encoder: StyleEncoder, x0: torch.Tensor, c: torch.Tensor) -> StylePosterior:
    return encoder(x0, c)


def sample(post: StylePosterior, eps_s: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw s = mu + sigma * eps_s."""
    if eps_s.shape[-1] != post.d_style:
        raise DimensionError(f"eps_s has dimension {eps_s.shape[-1]}, posterior {post.d_style}")
    return post.mu + post.sigma * eps_s


def kl_to_standard_normal(post: StylePosterior) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the style dimensions.

    Returns one value per batch entry (a scalar for an unbatched posterior).
    """
    if not (torch.isfinite(post.mu).all() and torch.isfinite(post.log_sigma).all()):
        raise NumericError("style posterior has non-finite entries")
    ls = post.log_sigma
    # expm1 keeps sigma^2 - 1 - 2 ln sigma non-negative near sigma = 1
    return 0.5 * (post.mu**2 + torch.expm1(2 * ls) - 2 * ls).sum(dim=-1)


def prior_sample(
    sigma_style: float,
    d_style: int,
    rng: torch.Generator | None = None,
    n: int | None = None,
) -> torch.Tensor:
    """Draw s ~ N(0, sigma_style^2 I); returns the zero vector for sigma 0."""
    if sigma_style < 0:
        raise ConfigurationError("sigma_style", f"must be >= 0, got {sigma_style}")
    shape = (d_style,) if n is None else (n, d_style)
    z = torch.randn(shape, generator=rng)
    if sigma_style == 0:
        return torch.zeros(shape)
    return z * float(sigma_style)
