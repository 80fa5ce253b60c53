"""Noise schedule, forward diffusion, and the denoising training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import SeededRng, ensure_finite

__all__ = ["NoiseSchedule", "linear_schedule", "forward_diffuse", "diffusion_loss"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels for a T-step diffusion chain.

    ``betas[t-1]`` is the variance added at step t (1-based); ``alpha_bars``
    holds the cumulative products of (1 - beta). All tables are float64.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.T < 1 or len(self.betas) != self.T:
            raise ValueError(f"betas must have length T={self.T}")
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.betas) < 0):
            raise ValueError("betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t) -> np.ndarray | float:
        """Cumulative ᾱ_t for t in 0..T (ᾱ_0 = 1). Accepts scalars or arrays."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ValueError(f"t must be within 0..{self.T}")
        table = np.concatenate([[1.0], self.alpha_bars])
        out = table[t_arr]
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end over T steps."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample x_t = √ᾱ_t · x0 + √(1-ᾱ_t) · eps.

    ``t`` is a 1-based step index; it may be a scalar or a per-batch-item
    array matched to the leading dimension of ``x0``.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"t must be within 1..{sched.T}")
    ab = sched.alpha_bar(t_arr)
    if t_arr.ndim == 0:
        c0 = float(math.sqrt(ab))
        c1 = float(math.sqrt(1.0 - ab))
        return c0 * x0 + c1 * eps
    if t_arr.shape[0] != x0.shape[0]:
        raise ValueError("per-item t must match the batch dimension")
    shape = (-1,) + (1,) * (x0.ndim - 1)
    c0 = torch.from_numpy(np.sqrt(ab)).to(x0.dtype).view(shape)
    c1 = torch.from_numpy(np.sqrt(1.0 - ab)).to(x0.dtype).view(shape)
    return c0 * x0 + c1 * eps


def diffusion_loss(predict, x0: torch.Tensor, layouts, sched: NoiseSchedule, rng: SeededRng) -> torch.Tensor:
    """Mean squared error between true and predicted noise.

    For each batch item a step t ~ U{1..T} and eps ~ N(0, 1) are drawn
    (per item, in item order, so accumulating microbatches consumes the
    stream exactly like one large batch). ``predict(x_t, t, layouts)`` must
    return a tensor shaped like x_t; ``layouts`` is forwarded untouched and
    may be None for unconditional models.
    """
    ensure_finite(x0, "x0")
    if x0.ndim < 2:
        raise ValueError("x0 must be batched: (B, ...)")
    b = x0.shape[0]
    ts = np.empty(b, dtype=np.int64)
    eps = torch.empty_like(x0)
    for i in range(b):
        ts[i] = int(rng.integers(1, sched.T + 1))
        eps[i] = torch.from_numpy(rng.normal(tuple(x0.shape[1:]))).to(x0.dtype)
    x_t = forward_diffuse(x0, ts, eps, sched)
    pred = predict(x_t, ts, layouts)
    if pred.shape != x0.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != x0 shape {tuple(x0.shape)}")
    return ((eps - pred) ** 2).mean()
