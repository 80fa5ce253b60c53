"""Attention-layer adapters: regional layout attention and learned prompt tokens.

Layout attention runs self-attention independently inside every instance
region (instance features get a learned class embedding added first) and in
the background region (null embedding), merges overlaps by averaging after
attention, and projects through an output layer that starts at exactly zero,
so a freshly inserted block is an identity residual.

Task prompts are small learned token matrices concatenated to attention
keys/values; per-class context tokens extend the same mechanism into a
cross-attention form whose condition may be absent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layout import Layout, RegionMaskSet
from .numerics import masked_softmax, scaled_dot_attention

__all__ = [
    "AdapterConfig",
    "ClassEmbeddingTable",
    "ContextTokenTable",
    "TaskPromptSet",
    "LayoutAttentionBlock",
    "AttentionProjections",
    "layout_attention",
    "prompted_self_attention",
    "prompted_cross_attention",
    "make_context_tokens",
]

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class AdapterConfig:
    """Construction knobs for the adapter stack."""

    num_classes: int
    d_base: int = 16  # width of the shared class-embedding table
    prompt_count: int = 8  # tokens per attention site
    layout_heads: int = 1  # head count inside layout attention
    use_context_tokens: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.d_base < 1 or self.prompt_count < 0 or self.layout_heads < 1:
            raise ValueError("d_base >= 1, prompt_count >= 0, layout_heads >= 1 required")


class ClassEmbeddingTable(nn.Module):
    """Shared (K+1)-row class embedding table; row K is the null embedding.

    The base table is shared by every layout-attention site; a per-site
    linear projection maps it to that site's feature width.
    """

    def __init__(self, num_classes: int, d_base: int):
        super().__init__()
        self.num_classes = num_classes
        self.d_base = d_base
        self.base = nn.Parameter(torch.randn(num_classes + 1, d_base) * PROMPT_INIT_STD)
        self.projections = nn.ParameterDict()

    @property
    def null_index(self) -> int:
        return self.num_classes

    def add_site(self, site: str, d: int) -> None:
        if site in self.projections:
            raise ValueError(f"site {site!r} already registered")
        self.projections[site] = nn.Parameter(torch.randn(self.d_base, d) / math.sqrt(self.d_base))

    def site_embeddings(self, site: str) -> torch.Tensor:
        """Projected (K+1, d_site) embeddings for one attention site."""
        if site not in self.projections:
            raise KeyError(f"unknown site {site!r}")
        return self.base @ self.projections[site]


class ContextTokenTable(nn.Module):
    """Per-class context embeddings for the toy cross-attention condition."""

    def __init__(self, num_classes: int, d_base: int):
        super().__init__()
        self.num_classes = num_classes
        self.d_base = d_base
        self.base = nn.Parameter(torch.randn(num_classes, d_base) * PROMPT_INIT_STD)
        self.projections = nn.ParameterDict()

    def add_site(self, site: str, d: int) -> None:
        if site in self.projections:
            raise ValueError(f"site {site!r} already registered")
        self.projections[site] = nn.Parameter(torch.randn(self.d_base, d) / math.sqrt(self.d_base))

    def site_table(self, site: str) -> torch.Tensor:
        """Projected (K, d_site) per-class context embeddings."""
        if site not in self.projections:
            raise KeyError(f"unknown site {site!r}")
        return self.base @ self.projections[site]


class TaskPromptSet(nn.Module):
    """Per-site learned prompt tokens plus a zero-initialized blend gate.

    The gate scales the difference between prompted and standard attention,
    so a freshly added prompt set leaves the host attention layer's output
    unchanged while remaining fully trainable.
    """

    def __init__(self, prompt_count: int):
        super().__init__()
        self.prompt_count = prompt_count
        self.prompts = nn.ParameterDict()
        self.gates = nn.ParameterDict()

    def add_site(self, site: str, d: int) -> None:
        if site in self.prompts:
            raise ValueError(f"site {site!r} already registered")
        self.prompts[site] = nn.Parameter(torch.randn(self.prompt_count, d) * PROMPT_INIT_STD)
        self.gates[site] = nn.Parameter(torch.zeros(()))

    def prompts_for(self, site: str) -> torch.Tensor:
        return self.prompts[site]

    def gate(self, site: str) -> torch.Tensor:
        return self.gates[site]


class LayoutAttentionBlock(nn.Module):
    """Regional attention over instance/background regions with zero-init output.

    Query/key/value projections are shared across instances; the class
    embedding table is held by reference (it is owned and registered
    elsewhere, since many blocks share it).
    """

    def __init__(self, d: int, site: str, table: ClassEmbeddingTable, heads: int = 1):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d = d
        self.site = site
        self.heads = heads
        self.phi_q = nn.Linear(d, d, bias=False)
        self.phi_k = nn.Linear(d, d, bias=False)
        self.phi_v = nn.Linear(d, d, bias=False)
        self.phi_out = nn.Linear(d, d)
        nn.init.zeros_(self.phi_out.weight)
        nn.init.zeros_(self.phi_out.bias)
        table.add_site(site, d)
        object.__setattr__(self, "_table", table)  # plain reference, not a submodule

    @property
    def table(self) -> ClassEmbeddingTable:
        return self._table


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, l, d = x.shape
    return x.view(*lead, l, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-3, -2).contiguous()
    *lead, l, heads, dh = x.shape
    return x.view(*lead, l, heads * dh)


def layout_attention(a: torch.Tensor, regions, block: LayoutAttentionBlock) -> torch.Tensor:
    """Instance-aware regional attention; returns a residual delta shaped like ``a``.

    ``a`` is (l, d) or (B, l, d) with l = h*w of the region masks; ``regions``
    is one RegionMaskSet or a sequence of B of them. Per region the features
    (plus that class's projected embedding, null for background) attend only
    among themselves; positions covered by several instances take the mean of
    the per-instance results, positions covered by none take the background
    result. The output projection maps the merged features to the delta.
    """
    single = a.ndim == 2
    ab = a.unsqueeze(0) if single else a
    if ab.ndim != 3:
        raise ValueError(f"a must be (l, d) or (B, l, d), got shape {tuple(a.shape)}")
    region_list = [regions] if isinstance(regions, RegionMaskSet) else list(regions)
    bsz, l, d = ab.shape
    if len(region_list) != bsz:
        raise ValueError(f"got {len(region_list)} region sets for batch of {bsz}")
    if d != block.d:
        raise ValueError(f"feature width {d} != block width {block.d}")
    emb = block.table.site_embeddings(block.site).to(dtype=ab.dtype)
    null_row = block.table.null_index

    branches = []  # (batch index, flat positions, embedding row, is_background)
    for b, rs in enumerate(region_list):
        h, w = rs.resolution
        if h * w != l:
            raise ValueError(f"region resolution {rs.resolution} incompatible with l={l}")
        for m, k in zip(rs.instance_masks, rs.class_ids):
            branches.append((b, np.flatnonzero(m.ravel()), k, False))
        bg = np.flatnonzero(rs.background_mask.ravel())
        if len(bg):
            branches.append((b, bg, null_row, True))

    lmax = max(len(idx) for _, idx, _, _ in branches)
    n = len(branches)
    flat = ab.reshape(bsz * l, d)
    feats = ab.new_zeros((n, lmax, d))
    valid = torch.zeros((n, lmax), dtype=torch.bool)
    idx_tensors = []
    for i, (b, idx, k, _) in enumerate(branches):
        t_idx = torch.from_numpy(idx + b * l)
        idx_tensors.append(t_idx)
        feats[i, : len(idx)] = flat[t_idx] + emb[k]
        valid[i, : len(idx)] = True

    q = _split_heads(block.phi_q(feats), block.heads)
    k = _split_heads(block.phi_k(feats), block.heads)
    v = _split_heads(block.phi_v(feats), block.heads)
    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    weights = masked_softmax(logits, valid.view(n, 1, 1, lmax), dim=-1)
    attended = _merge_heads(torch.matmul(weights, v))  # (n, lmax, d)

    sums = ab.new_zeros((bsz * l, d))
    counts = ab.new_zeros((bsz * l, 1))
    merged = ab.new_zeros((bsz * l, d))
    for i, (b, idx, _, is_bg) in enumerate(branches):
        rows = attended[i, : len(idx)]
        if is_bg:
            merged = merged.index_copy(0, idx_tensors[i], rows)
        else:
            sums = sums.index_add(0, idx_tensors[i], rows)
            counts = counts.index_add(0, idx_tensors[i], torch.ones(len(idx), 1, dtype=ab.dtype))
    covered = counts > 0
    merged = torch.where(covered, sums / counts.clamp(min=1), merged)
    delta = block.phi_out(merged.view(bsz, l, d))
    return delta.squeeze(0) if single else delta


@dataclass
class AttentionProjections:
    """Query/key/value maps (e.g. nn.Linear) plus the head count they serve."""

    q: object
    k: object
    v: object
    heads: int = 1


def _concat_kv(a: torch.Tensor, c, g) -> torch.Tensor:
    """Stack [c, a, g] along the token axis, skipping absent/empty parts."""
    batched = a.ndim == 3
    parts = []
    for part in (c, a, g):
        if part is None or part.shape[-2] == 0:
            continue
        if part.shape[-1] != a.shape[-1]:
            raise ValueError(f"token width {part.shape[-1]} != feature width {a.shape[-1]}")
        if batched and part.ndim == 2:
            part = part.unsqueeze(0).expand(a.shape[0], -1, -1)
        parts.append(part)
    return parts[0] if len(parts) == 1 else torch.cat(parts, dim=-2)


def _attend(a: torch.Tensor, kv: torch.Tensor, proj: AttentionProjections,
            kv_valid: torch.Tensor | None = None) -> torch.Tensor:
    q = _split_heads(proj.q(a), proj.heads)
    k = _split_heads(proj.k(kv), proj.heads)
    v = _split_heads(proj.v(kv), proj.heads)
    if kv_valid is None:
        out = scaled_dot_attention(q, k, v)
    else:
        logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        shape = [1] * logits.ndim
        shape[0], shape[-1] = kv_valid.shape[0], kv_valid.shape[-1]
        weights = masked_softmax(logits, kv_valid.view(shape), dim=-1)
        out = torch.matmul(weights, v)
    return _merge_heads(out)


def prompted_self_attention(a: torch.Tensor, g: torch.Tensor | None,
                            proj: AttentionProjections) -> torch.Tensor:
    """Attention with queries from ``a`` and keys/values from [a, g].

    ``a`` is (l, d) or (B, l, d); ``g`` is (m, d) shared across the batch
    (m = 0 or g = None reduces to standard self-attention).
    """
    return _attend(a, _concat_kv(a, None, g), proj)


def prompted_cross_attention(a: torch.Tensor, c: torch.Tensor | None,
                             g: torch.Tensor | None, proj: AttentionProjections,
                             c_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Attention with keys/values from [c, a, g]; an absent condition drops c.

    With c = None (or zero tokens) this is exactly ``prompted_self_attention``:
    the conditional model degrades to the unconditional form. For batched
    ``a`` with per-item condition lengths, pass padded ``c`` of shape
    (B, r_max, d) plus a boolean ``c_valid`` (B, r_max).
    """
    if c is None or c.shape[-2] == 0:
        return prompted_self_attention(a, g, proj)
    if c.shape[-1] != a.shape[-1]:
        raise ValueError(f"context width {c.shape[-1]} != feature width {a.shape[-1]}")
    batched = a.ndim == 3
    if batched and c.ndim == 2:
        c = c.unsqueeze(0).expand(a.shape[0], -1, -1)
    kv = _concat_kv(a, c, g)
    if c_valid is None:
        return _attend(a, kv, proj)
    if c_valid.shape != c.shape[:-1]:
        raise ValueError("c_valid must match context token shape")
    n_rest = kv.shape[-2] - c.shape[-2]
    ones = torch.ones((c_valid.shape[0], n_rest), dtype=torch.bool)
    return _attend(a, kv, proj, kv_valid=torch.cat([c_valid, ones], dim=-1))


def make_context_tokens(layout: Layout, embed: torch.Tensor) -> torch.Tensor:
    """One context token per distinct class in the layout, sorted by class id.

    ``embed`` is the (K, d) per-class context table; an empty layout yields
    zero tokens (the absent condition).
    """
    if embed.shape[0] < layout.num_classes:
        raise ValueError(f"embed table has {embed.shape[0]} rows, layout needs {layout.num_classes}")
    present = sorted({inst.class_id for inst in layout.instances})
    if not present:
        return embed.new_zeros((0, embed.shape[1]))
    return embed[torch.tensor(present, dtype=torch.long)]
