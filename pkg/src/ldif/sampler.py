"""Reverse-process samplers, classifier-free guidance, and mask-driven editing.

Three samplers share one loop skeleton: DDPM ancestral sampling over the
full chain, deterministic (or eta-noised) DDIM over an evenly spaced step
subsequence, and PLMS, which feeds a 4th-order linear multistep combination
of recent noise predictions into deterministic DDIM updates. Guidance
extrapolates from the empty-layout prediction toward the conditional one.
Editing re-noises the preserved region of the original image to the current
step's level after every update, and restores it exactly at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .layout import Layout
from .numerics import SeededRng, ensure_finite
from .schedule import NoiseSchedule, forward_diffuse
from .unet import DenoiserModel

__all__ = [
    "SamplerConfig",
    "CFG_MODES",
    "SAMPLER_KINDS",
    "cfg_combine",
    "null_prediction",
    "timestep_sequence",
    "ddim_step",
    "sample",
    "sample_batch",
    "ddpm_sample",
    "ddim_sample",
    "plms_sample",
    "edit_sample",
]

CFG_MODES = ("standard", "difference")
SAMPLER_KINDS = ("ddpm", "ddim", "plms")


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler kind plus guidance and stochasticity knobs.

    ``cfg_mode`` selects between the usual guidance update
    eps_null + s*(eps_cond - eps_null) and the "difference" form
    (1-s)*eps_null + s*(eps_cond - eps_null).
    """

    kind: str = "plms"
    steps: int = 50
    cfg_scale: float = 1.0
    cfg_mode: str = "standard"
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "plms" and self.steps < 4:
            raise ValueError("plms needs at least 4 steps")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.cfg_mode not in CFG_MODES:
            raise ValueError(f"cfg_mode must be one of {CFG_MODES}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def cfg_combine(eps_cond: torch.Tensor, eps_null: torch.Tensor, s: float,
                mode: str = "standard") -> torch.Tensor:
    """Blend conditional and null predictions with guidance scale s.

    Standard mode returns eps_cond exactly at s=1 and eps_null exactly at
    s=0; difference mode evaluates (1-s)*eps_null + s*(eps_cond - eps_null)
    as written.
    """
    if eps_cond.shape != eps_null.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_null.shape)}")
    if mode == "standard":
        if s == 1.0:
            return eps_cond
        if s == 0.0:
            return eps_null
        return eps_null + s * (eps_cond - eps_null)
    if mode == "difference":
        return (1.0 - s) * eps_null + s * (eps_cond - eps_null)
    raise ValueError(f"cfg_mode must be one of {CFG_MODES}")


def null_prediction(model: DenoiserModel, x_t: torch.Tensor, t) -> torch.Tensor:
    """Noise prediction under the empty layout (the guidance negative)."""
    size = model.config.image_size
    return model(x_t, t, Layout.empty(model.num_classes, (size, size)))


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """``steps`` evenly spaced step indices from T down to 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}, got {steps}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    seq = np.round(np.linspace(T, 1, steps)).astype(np.int64)
    if np.any(np.diff(seq) >= 0):
        raise RuntimeError("step sequence not strictly decreasing")
    return seq


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule, eta: float = 0.0,
              noise: torch.Tensor | None = None) -> torch.Tensor:
    """One deterministic-implicit update from step t to step t_prev.

    Reconstructs x0 from the noise estimate and re-noises it to level
    t_prev; a nonzero ``eta`` interpolates toward ancestral sampling and
    requires ``noise``.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got {t_prev} >= {t}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        out = out + sigma * noise
    return out


def _guided_eps(model: DenoiserModel, x: torch.Tensor, t: int, layouts,
                config: SamplerConfig) -> torch.Tensor:
    if model.mode == "unconditional":
        return model(x, t, None)
    eps_cond = model(x, t, layouts)
    if config.cfg_mode == "standard" and config.cfg_scale == 1.0:
        return eps_cond
    size = model.config.image_size
    empties = [Layout.empty(lay.num_classes, (size, size)) for lay in layouts]
    eps_null = model(x, t, empties)
    return cfg_combine(eps_cond, eps_null, config.cfg_scale, config.cfg_mode)


def _run_sampler(model: DenoiserModel, layouts, config: SamplerConfig,
                 sched: NoiseSchedule, rng: SeededRng, blend=None, n: int = 1) -> torch.Tensor:
    """Shared loop: init noise, per-step updates, optional post-step blending."""
    if config.kind == "ddpm" and config.steps != sched.T:
        raise ValueError(f"ddpm runs the full chain; set steps={sched.T}")
    init_rng = rng.child("init")
    step_rng = rng.child("steps")
    blend_rng = rng.child("blend")
    size = model.config.image_size
    shape = (model.config.out_channels, size, size)
    if layouts is not None:
        n = len(layouts)
    x = torch.stack([init_rng.torch_normal(shape) for _ in range(n)])

    seq = timestep_sequence(sched.T, config.steps)
    history: list[torch.Tensor] = []
    for i, t in enumerate(seq):
        t = int(t)
        t_prev = int(seq[i + 1]) if i + 1 < len(seq) else 0
        eps = _guided_eps(model, x, t, layouts, config)
        ensure_finite(eps, f"noise prediction at t={t}")
        if config.kind == "ddpm":
            beta = float(sched.betas[t - 1])
            mean = (x - beta / math.sqrt(1.0 - sched.alpha_bar(t)) * eps) / math.sqrt(1.0 - beta)
            if t > 1:
                var = beta * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))
                z = step_rng.torch_normal((n,) + shape)
                x = mean + math.sqrt(var) * z
            else:
                x = mean
        elif config.kind == "ddim":
            z = step_rng.torch_normal((n,) + shape) if config.eta > 0 and t_prev > 0 else None
            x = ddim_step(x, eps, t, t_prev, sched, eta=config.eta if t_prev > 0 else 0.0, noise=z)
        else:  # plms
            if len(history) < 3:
                x_provisional = ddim_step(x, eps, t, t_prev, sched)
                eps_prev = (_guided_eps(model, x_provisional, t_prev, layouts, config)
                            if t_prev > 0 else eps)
                eps_used = (eps + eps_prev) / 2.0
            else:
                d1 = history[-1] - eps
                d2 = history[-2] - eps
                d3 = history[-3] - eps
                eps_used = eps + (-59.0 * d1 + 37.0 * d2 - 9.0 * d3) / 24.0
            x = ddim_step(x, eps_used, t, t_prev, sched)
            history.append(eps)
            if len(history) > 3:
                history.pop(0)
        if blend is not None:
            x = blend(x, t_prev, blend_rng)
    if config.kind == "plms":
        x = x.clamp(-1.0, 1.0)
    return x


def sample_batch(model: DenoiserModel, layouts, config: SamplerConfig,
                 sched: NoiseSchedule, rng: SeededRng, n: int = 1) -> torch.Tensor:
    """Generate one image per layout (or ``n`` unconditional images); (B, C, H, W)."""
    layouts = list(layouts) if layouts is not None else None
    with torch.no_grad():
        return _run_sampler(model, layouts, config, sched, rng, n=n)


def sample(model: DenoiserModel, layout, config: SamplerConfig,
           sched: NoiseSchedule, rng: SeededRng) -> torch.Tensor:
    """Generate a single image (C, H, W)."""
    layouts = [layout] if layout is not None else None
    with torch.no_grad():
        return _run_sampler(model, layouts, config, sched, rng)[0]


def ddpm_sample(model, layout, config: SamplerConfig, sched, rng) -> torch.Tensor:
    if config.kind != "ddpm":
        raise ValueError("config.kind must be 'ddpm'")
    return sample(model, layout, config, sched, rng)


def ddim_sample(model, layout, config: SamplerConfig, sched, rng) -> torch.Tensor:
    if config.kind != "ddim":
        raise ValueError("config.kind must be 'ddim'")
    return sample(model, layout, config, sched, rng)


def plms_sample(model, layout, config: SamplerConfig, sched, rng) -> torch.Tensor:
    if config.kind != "plms":
        raise ValueError("config.kind must be 'plms'")
    return sample(model, layout, config, sched, rng)


def edit_sample(model: DenoiserModel, original: torch.Tensor, layout,
                edit_mask, config: SamplerConfig, sched: NoiseSchedule,
                rng: SeededRng) -> torch.Tensor:
    """Regenerate the masked region of ``original`` under ``layout``.

    ``edit_mask`` is a binary (H, W) map, 1 = regenerate. After every
    sampler step the preserved region is replaced by the original diffused
    to the step's noise level (fresh noise each time); after the last step
    it is replaced by the original itself, so preservation is exact.
    """
    size = model.config.image_size
    if original.shape != (model.config.out_channels, size, size):
        raise ValueError(f"original must be {(model.config.out_channels, size, size)}, got {tuple(original.shape)}")
    mask_np = np.asarray(edit_mask)
    if mask_np.shape != (size, size):
        raise ValueError(f"edit_mask must be {(size, size)}, got {mask_np.shape}")
    mask_t = torch.from_numpy((mask_np != 0)).to(torch.bool)
    original = original.to(torch.float32)

    def blend(x: torch.Tensor, t_prev: int, blend_rng: SeededRng) -> torch.Tensor:
        if t_prev < 1:
            return torch.where(mask_t, x, original.unsqueeze(0))
        noise = blend_rng.torch_normal(tuple(original.shape))
        diffused = forward_diffuse(original, t_prev, noise, sched)
        return torch.where(mask_t, x, diffused.unsqueeze(0))

    layouts = [layout] if layout is not None else None
    with torch.no_grad():
        out = _run_sampler(model, layouts, config, sched, rng, blend=blend)[0]
        out = torch.where(mask_t, out, original)
    return out
