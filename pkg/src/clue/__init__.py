"""Prompt + style-latent conditioned diffusion at toy scale."""

__version__ = "0.1.0"
