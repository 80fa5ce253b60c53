"""Core numeric primitives: seeded counter-based RNG, stable softmax,
scaled dot-product attention, and finite-difference gradient checking.

Tensors are plain ``torch.Tensor`` objects (row-major, float32 for training,
float64 for gradient checks). Values crossing module boundaries are expected
to be finite; ``ensure_finite`` is the shared guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "SeededRng",
    "ensure_finite",
    "softmax",
    "scaled_dot_attention",
    "grad_check",
    "GradCheckReport",
]


def _mix64(a: int, b: int) -> int:
    """Stable 64-bit mix (splitmix64 finalizer) for deriving substream keys."""
    x = (a * 0x9E3779B97F4A7C15 + b) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class SeededRng:
    """Counter-based deterministic random generator (Philox 4x64).

    Identical seed + call sequence yields byte-identical value sequences on
    every platform. Substreams derived with :meth:`child` are statistically
    independent and equally reproducible, which makes per-sample parallel
    generation give the same result as serial generation.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: int | str) -> "SeededRng":
        """Derive an independent substream keyed by ``tag``."""
        if isinstance(tag, str):
            tag_int = 0
            for byte in tag.encode("utf-8"):
                tag_int = _mix64(tag_int, byte)
        else:
            tag_int = int(tag) & 0xFFFFFFFFFFFFFFFF
        return SeededRng(self.seed, _mix64(self.stream ^ 0xA5A5A5A5A5A5A5A5, tag_int))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high), numpy's half-open convention."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def torch_normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.normal(shape)).to(dtype)


def ensure_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    """Reject NaN/Inf at module boundaries."""
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return t


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max-subtraction). Rejects non-finite input."""
    ensure_finite(logits, "logits")
    if not -logits.ndim <= dim < logits.ndim:
        raise ValueError(f"dim {dim} invalid for shape {tuple(logits.shape)}")
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    exps = torch.exp(shifted)
    return exps / exps.sum(dim=dim, keepdim=True)


def masked_softmax(logits: torch.Tensor, key_valid: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over the keys flagged valid; invalid keys get exactly zero weight.

    Rows with no valid key yield a uniform distribution (callers are expected
    to discard such rows).
    """
    neg_inf = torch.finfo(logits.dtype).min
    masked = logits.masked_fill(~key_valid, neg_inf)
    row_dead = ~key_valid.expand_as(logits).any(dim=dim, keepdim=True)
    masked = torch.where(row_dead, torch.zeros_like(masked), masked)
    shifted = masked - masked.amax(dim=dim, keepdim=True)
    exps = torch.exp(shifted)
    exps = exps * key_valid.to(exps.dtype)
    exps = torch.where(row_dead, torch.ones_like(exps), exps)
    return exps / exps.sum(dim=dim, keepdim=True)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q Kᵀ / √d) V with leading batch dimensions broadcast.

    q: (..., l, d), k: (..., n, d), v: (..., n, d) → (..., l, d_v).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    return torch.matmul(softmax(logits, dim=-1), v)


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central finite differences."""

    max_rel_err: float
    worst_param: str
    n_elements: int
    rel_tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.rel_tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.rel_tol:.1e}) over {self.n_elements} elements, "
            f"worst in {self.worst_param!r}"
        )


def grad_check(
    f,
    params: dict[str, torch.Tensor],
    rel_tol: float = 1e-4,
    rng: SeededRng | None = None,
    min_elements: int = 200,
    err_floor: float = 1e-2,
) -> GradCheckReport:
    """Check autograd gradients of scalar ``f()`` against central differences.

    Every parameter tensor contributes at least one sampled element and the
    total sample is at least ``min_elements`` (capped by the parameter count).
    Step size h = 1e-5 * max(1, |θ|). The reported error per element is
    |fd − analytic| / max(|fd|, |analytic|, err_floor). Parameters must be
    float64; finite-difference noise at float32 masks real defects.
    """
    if not params:
        raise ValueError("params is empty")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name!r} is {p.dtype}")
    rng = rng or SeededRng(0)

    loss_a = f()
    loss_b = f()
    if float(loss_a.detach()) != float(loss_b.detach()):
        raise RuntimeError(
            "f is not deterministic under a fixed seed: "
            f"{float(loss_a.detach())!r} != {float(loss_b.detach())!r}"
        )

    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss_a, tensors, allow_unused=True)
    analytic = {
        n: (g.detach() if g is not None else torch.zeros_like(t))
        for n, t, g in zip(names, tensors, grads)
    }

    # At least one element per tensor, remainder spread proportionally by size.
    sizes = {n: params[n].numel() for n in names}
    total = sum(sizes.values())
    budget = min(max(min_elements, len(names)), total)
    counts = {n: 1 for n in names}
    remaining = budget - len(names)
    if remaining > 0:
        for n in names:
            extra = int(round(remaining * sizes[n] / total))
            counts[n] = min(sizes[n], counts[n] + extra)
    # Rounding can leave the total short of the budget; top up wherever
    # capacity remains so the "at least min_elements" promise holds.
    shortfall = budget - sum(counts.values())
    while shortfall > 0:
        progressed = False
        for n in names:
            if shortfall <= 0:
                break
            if counts[n] < sizes[n]:
                counts[n] += 1
                shortfall -= 1
                progressed = True
        if not progressed:
            break
    picks: list[tuple[str, int]] = []
    for n in names:
        idx = rng.child(n).permutation(sizes[n])[: counts[n]]
        picks.extend((n, int(i)) for i in idx)

    max_err = 0.0
    worst = names[0]
    per_param = {n: 0.0 for n in names}
    with torch.no_grad():
        for name, flat_idx in picks:
            p = params[name]
            theta = p.view(-1)[flat_idx].item()
            h = 1e-5 * max(1.0, abs(theta))
            p.view(-1)[flat_idx] = theta + h
            f_plus = float(f())
            p.view(-1)[flat_idx] = theta - h
            f_minus = float(f())
            p.view(-1)[flat_idx] = theta
            fd = (f_plus - f_minus) / (2.0 * h)
            an = analytic[name].view(-1)[flat_idx].item()
            err = abs(fd - an) / max(abs(fd), abs(an), err_floor)
            per_param[name] = max(per_param[name], err)
            if err > max_err:
                max_err, worst = err, name

    return GradCheckReport(
        max_rel_err=max_err,
        worst_param=worst,
        n_elements=len(picks),
        rel_tol=rel_tol,
        per_param=per_param,
    )
