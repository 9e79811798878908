"""The trainable bundle: prompt registry, denoiser and style encoder."""

from __future__ import annotations

import torch
import torch.nn as nn

from .denoiser import Denoiser, DenoiserConfig, PromptRegistry
from .stylecodec import StyleEncoder, StylePosterior


class ClueModel(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.registry = PromptRegistry(self.cfg.prompts, self.cfg.prompt_tokens, self.cfg.d_cond)
        self.denoiser = Denoiser(self.cfg)
        self.style_encoder = StyleEncoder(self.cfg)

    def prompt(self, prompt_ids) -> torch.Tensor:
        return self.registry(prompt_ids)

    def encode(self, x0: torch.Tensor, c: torch.Tensor) -> StylePosterior:
        return self.style_encoder(x0, c)

    def predict_v(self, x_t, t, c, s) -> torch.Tensor:
        return self.denoiser(x_t, t, c, s)

    def style_parameters(self):
        return self.style_encoder.parameters()

    def denoiser_parameters(self):
        return self.denoiser.parameters()
