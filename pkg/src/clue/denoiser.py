"""Toy pixel-space U-Net predicting velocity from (x_t, t, prompt, style).

Every down and up level runs

    residual conv block -> prompt cross-attention -> style cross-attention

where the style latent is presented to its attention layer as a single
conditioning token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConditioningError, ConfigurationError, DimensionError

# Fixed-format prompts, one per class, in class-index order.
DEFAULT_PROMPTS: tuple[str, ...] = (
    "Tympanic membrane is translucent, no fluid, and no perforation.",
    "Tympanic membrane has fluid behind it, often with a dull or amber hue.",
    "Tympanic membrane is perforated.",
)


@dataclass
class DenoiserConfig:
    channels: tuple[int, ...] = (32, 64)
    bottleneck: int = 64
    d_cond: int = 32
    d_style: int = 64
    heads: int = 4
    temb_dim: int = 128
    prompt_tokens: int = 4
    resolution: int = 32
    in_channels: int = 3
    groups: int = 8
    prompts: tuple[str, ...] = field(default_factory=lambda: DEFAULT_PROMPTS)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.prompts = tuple(self.prompts)
        for name in ("bottleneck", "d_cond", "d_style", "heads", "temb_dim",
                     "prompt_tokens", "resolution", "in_channels", "groups"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"model.{name}", "must be positive")
        if not self.channels or min(self.channels) <= 0:
            raise ConfigurationError("model.channels", "need at least one positive width")
        if self.resolution % 2 ** (len(self.channels) - 1):
            raise ConfigurationError(
                "model.resolution",
                f"{self.resolution} not divisible by 2**{len(self.channels) - 1}",
            )
        for c in (*self.channels, self.bottleneck):
            if c % self.heads or c % self.groups:
                raise ConfigurationError("model.channels", f"width {c} not divisible by heads/groups")
        if not self.prompts:
            raise ConfigurationError("model.prompts", "registry needs at least one prompt")


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return attention_weights(q, k) @ v


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :].to(t.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int | None, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out) if temb_dim else None
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Pre-norm multi-head cross-attention with a residual connection.

    The output projection starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, dim: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, z: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if context.shape[-1] != self.to_k.in_features:
            raise DimensionError(
                f"context dim {context.shape[-1]} != expected {self.to_k.in_features}"
            )
        if z.shape[-1] != self.to_q.in_features:
            raise DimensionError(f"feature dim {z.shape[-1]} != expected {self.to_q.in_features}")
        b, n, d = z.shape
        q = self._split(self.to_q(self.norm(z)))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        w = attention_weights(q, k)
        if self.keep_weights:
            self.last_weights = w.detach()
        out = (w @ v).transpose(1, 2).reshape(b, n, d)
        return z + self.to_out(out)


class DualCrossAttention(nn.Module):
    """Prompt cross-attention followed by style cross-attention."""

    def __init__(self, dim: int, d_cond: int, d_style: int, heads: int = 4):
        super().__init__()
        self.prompt_attn = CrossAttention(dim, d_cond, heads)
        self.style_attn = CrossAttention(dim, d_style, heads)

    def forward(self, z: torch.Tensor, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        b, ch, h, w = z.shape
        if s.ndim != 2 or s.shape[0] != b:
            raise DimensionError(f"style latent must be (batch, d_style), got {tuple(s.shape)}")
        tokens = z.flatten(2).transpose(1, 2)
        tokens = self.prompt_attn(tokens, c)
        tokens = self.style_attn(tokens, s[:, None, :])
        return tokens.transpose(1, 2).reshape(b, ch, h, w)


class PromptRegistry(nn.Module):
    """Learned token sequence for each registered prompt string."""

    def __init__(self, prompts, n_tokens: int, d_cond: int):
        super().__init__()
        self.prompts = tuple(prompts)
        self._index = {p: i for i, p in enumerate(self.prompts)}
        self.tokens = nn.Parameter(torch.randn(len(self.prompts), n_tokens, d_cond) * 0.5)

    def __len__(self):
        return len(self.prompts)

    def index(self, prompt) -> int:
        """Resolve a prompt string or class index to its registry slot."""
        if isinstance(prompt, str):
            if prompt not in self._index:
                raise ConditioningError(f"unregistered prompt {prompt!r}")
            return self._index[prompt]
        i = int(prompt)
        if not 0 <= i < len(self.prompts):
            raise ConditioningError(f"no prompt registered for class {i}")
        return i

    def forward(self, prompt_ids) -> torch.Tensor:
        if isinstance(prompt_ids, torch.Tensor):
            ids = prompt_ids.long()
            if ids.numel() and (ids.min() < 0 or ids.max() >= len(self.prompts)):
                raise ConditioningError(f"prompt index outside registry of {len(self.prompts)}")
        else:
            ids = torch.tensor([self.index(p) for p in prompt_ids], dtype=torch.long)
        return self.tokens[ids.to(self.tokens.device)]


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.temb_dim // 2, cfg.temb_dim),
            nn.SiLU(),
            nn.Linear(cfg.temb_dim, cfg.temb_dim),
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down_res.append(ResBlock(prev, c, cfg.temb_dim, cfg.groups))
            self.down_attn.append(DualCrossAttention(c, cfg.d_cond, cfg.d_style, cfg.heads))
            if i < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

        self.mid = ResBlock(prev, cfg.bottleneck, cfg.temb_dim, cfg.groups)
        prev = cfg.bottleneck

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(ch))):
            c = ch[i]
            self.up_res.append(ResBlock(prev + c, c, cfg.temb_dim, cfg.groups))
            self.up_attn.append(DualCrossAttention(c, cfg.d_cond, cfg.d_style, cfg.heads))
            if i > 0:
                self.upsample.append(nn.Conv2d(c, c, 3, padding=1))
            prev = c

        self.norm_out = nn.GroupNorm(min(cfg.groups, ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.in_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, t, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != (cfg.in_channels, cfg.resolution, cfg.resolution):
            raise DimensionError(
                f"expected (B, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}), "
                f"got {tuple(x_t.shape)}"
            )
        b = x_t.shape[0]
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), int(t), dtype=torch.long)
        elif t.ndim == 0:
            t = t.expand(b)
        if c.ndim != 3 or c.shape[0] != b or c.shape[-1] != cfg.d_cond:
            raise DimensionError(f"prompt embedding must be (B, L, {cfg.d_cond}), got {tuple(c.shape)}")
        if s.ndim != 2 or s.shape != (b, cfg.d_style):
            raise DimensionError(f"style latent must be ({b}, {cfg.d_style}), got {tuple(s.shape)}")
        temb = self.time_mlp(timestep_embedding(t.to(x_t.device), cfg.temb_dim // 2).to(x_t.dtype))

        h = self.conv_in(x_t)
        skips = []
        for i, (res, attn) in enumerate(zip(self.down_res, self.down_attn)):
            h = attn(res(h, temb), c, s)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb)
        for j, (res, attn) in enumerate(zip(self.up_res, self.up_attn)):
            h = res(torch.cat([h, skips.pop()], dim=1), temb)
            h = attn(h, c, s)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_v(model: Denoiser, x_t, t, c, s) -> torch.Tensor:
    return model(x_t, t, c, s)
