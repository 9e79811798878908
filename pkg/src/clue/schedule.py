"""Closed-form diffusion math: forward noising, velocity target, DDIM.

Timesteps are 1-based. ``alpha_bar(0)`` is defined as 1 so the last
deterministic DDIM step (t -> 0) lands on the clean-image estimate.

Every function accepts ``t`` either as a Python int (one timestep for the
whole tensor) or as a 1-D integer tensor with one timestep per leading
batch entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, OrderingError

Kind = Literal["linear", "scaled_linear"]
Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"

    @classmethod
    def from_alpha_bars(cls, alpha_bars, kind: str = "custom") -> "DiffusionSchedule":
        """Build a schedule from an explicit cumulative table.

        No monotonicity check is made, so limiting cases (alpha_bar of
        exactly 0 or 1) can be injected.
        """
        ab = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], ab[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            betas = np.where(prev > 0, 1.0 - ab / prev, 1.0)
        return cls(T=len(ab), betas=betas, alpha_bars=ab, kind=kind)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise OrderingError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def table(self) -> np.ndarray:
        """alpha_bar indexed 0..T with the alpha_bar(0)=1 convention."""
        return np.concatenate([[1.0], self.alpha_bars])

    def check(self) -> None:
        """Raise if the schedule invariants do not hold."""
        if len(self.betas) != self.T or len(self.alpha_bars) != self.T:
            raise ConfigurationError("T", "table lengths disagree with T")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ConfigurationError("betas", "every beta must lie in (0, 1)")
        if np.any(np.diff(self.betas) < 0):
            raise ConfigurationError("betas", "betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ConfigurationError("alpha_bars", "alpha_bars must strictly decrease")


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: Kind = "linear",
) -> DiffusionSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigurationError("T", f"must be a positive integer, got {T!r}")
    if not 0 < beta_start < 1:
        raise ConfigurationError("beta_start", f"must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ConfigurationError("beta_end", f"must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ConfigurationError("beta_end", "must be >= beta_start")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ConfigurationError("kind", f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(T=int(T), betas=betas, alpha_bars=alpha_bars, kind=kind)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride descending grid from T to 0 (both ends included)."""
    if not 1 <= steps <= T:
        raise ConfigurationError("inference_steps", f"must lie in [1, {T}], got {steps}")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(g) for g in grid]


def _coeffs(t: Timestep, sched: DiffusionSchedule, like: torch.Tensor):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable to ``like``."""
    table = sched.table()
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().numpy().astype(int)
        if np.any(idx < 0) or np.any(idx > sched.T):
            raise OrderingError(f"timesteps outside [0, {sched.T}]")
        ab = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
        ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
    else:
        ab = torch.as_tensor(sched.alpha_bar(int(t)), dtype=like.dtype, device=like.device)
    return ab.sqrt(), (1.0 - ab).clamp_min(0.0).sqrt()


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    _same_shape(x0, eps, "q_sample")
    a, b = _coeffs(t, sched, x0)
    return a * x0 + b * eps


def v_target(x0: torch.Tensor, eps: torch.Tensor, t: Timestep, sched: DiffusionSchedule) -> torch.Tensor:
    _same_shape(x0, eps, "v_target")
    a, b = _coeffs(t, sched, x0)
    return a * eps - b * x0


def from_v(x_t: torch.Tensor, v: torch.Tensor, t: Timestep, sched: DiffusionSchedule):
    """Recover (x0_hat, eps_hat) from a noised sample and a velocity."""
    _same_shape(x_t, v, "from_v")
    a, b = _coeffs(t, sched, x_t)
    return a * x_t - b * v, b * x_t + a * v


def ddim_step(
    x_t: torch.Tensor,
    v_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM update from ``t`` to ``t_prev``."""
    if not 0 <= t_prev < t:
        raise OrderingError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x0_hat, eps_hat = from_v(x_t, v_hat, t, sched)
    a, b = _coeffs(t_prev, sched, x_t)
    return a * x0_hat + b * eps_hat
