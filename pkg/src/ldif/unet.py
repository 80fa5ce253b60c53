"""Denoising U-Net backbone and the adapter-insertion mechanism.

The backbone is a small timestep-conditioned U-Net with QKV self-attention
at configured resolutions. ``insert_adapters`` wraps a pretrained
unconditional backbone with layout-attention residual blocks and task
prompts without touching its weights; ``to_concat_baseline`` instead widens
the input convolution so the layout enters as extra channels. Both start
out computing exactly what the backbone computes.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .adapters import (
    AdapterConfig,
    AttentionProjections,
    ClassEmbeddingTable,
    ContextTokenTable,
    LayoutAttentionBlock,
    TaskPromptSet,
    layout_attention,
    prompted_cross_attention,
)
from .layout import Layout, cached_rasterize, to_channel_mask

__all__ = [
    "UNetConfig",
    "UNet",
    "AdapterState",
    "DenoiserModel",
    "ParamReport",
    "predict_noise",
    "insert_adapters",
    "to_concat_baseline",
    "param_report",
]


@dataclass(frozen=True)
class UNetConfig:
    """Geometry of the denoising U-Net."""

    image_size: int = 32
    in_channels: int = 3
    out_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    attention_resolutions: tuple[int, ...] = (16, 8)
    num_res_blocks: int = 2
    time_embed_dim: int = 128
    heads: int = 2
    groups: int = 8

    def __post_init__(self):
        levels = len(self.channels)
        if levels < 1:
            raise ValueError("need at least one channel width")
        if self.image_size % (1 << (levels - 1)) != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{levels - 1}")
        schedule = {self.image_size >> i for i in range(levels)}
        extra = set(self.attention_resolutions) - schedule
        if extra:
            raise ValueError(f"attention resolutions {sorted(extra)} not in level schedule {sorted(schedule)}")
        for ch in self.channels:
            if ch % self.groups != 0:
                raise ValueError(f"channel width {ch} not divisible by {self.groups} norm groups")
            if ch % self.heads != 0:
                raise ValueError(f"channel width {ch} not divisible by {self.heads} heads")

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size >> i for i in range(len(self.channels)))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the (1-based) step index; t is a float tensor (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(t.shape[0], 1)], dim=-1)
    return emb


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv pair with an additive timestep projection.

    The second convolution starts at zero so a fresh block is an identity
    (plus skip projection when widths change).
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Pre-normalized QKV self-attention over spatial positions.

    In adapted mode the same projections also produce a prompted variant
    (keys/values extended with context tokens and task prompts) blended in
    through a zero-initialized gate, and a layout-attention residual is
    applied to the result.
    """

    def __init__(self, channels: int, heads: int, groups: int, site: str):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.site = site
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, ctx: "_ForwardContext | None" = None) -> torch.Tensor:
        b, c, hh, ww = x.shape
        a = self.norm(x).view(b, c, hh * ww).transpose(1, 2)
        proj = AttentionProjections(q=self.to_q, k=self.to_k, v=self.to_v, heads=self.heads)
        std = self.proj(prompted_cross_attention(a, None, None, proj))
        h = x + std.transpose(1, 2).view(b, c, hh, ww)
        if ctx is None:
            return h
        state = ctx.state
        g = state.prompts.prompts_for(self.site).to(dtype=a.dtype)
        c_tokens, c_valid = ctx.context_for(self.site, a.dtype)
        prompted = self.proj(prompted_cross_attention(a, c_tokens, g, proj, c_valid=c_valid))
        gate = state.prompts.gate(self.site)
        h = h + (gate * (prompted - std)).transpose(1, 2).view(b, c, hh, ww)
        block = state.layout_blocks[self.site]
        flat = h.view(b, c, hh * ww).transpose(1, 2)
        delta = layout_attention(flat, ctx.regions_for((hh, ww)), block)
        return h + delta.transpose(1, 2).view(b, c, hh, ww)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2.0, mode="nearest"))


class UNet(nn.Module):
    """Denoising U-Net: conv stem, down/mid/up residual stages, conv head."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cfg = config
        c0 = cfg.channels[0]
        self.time_mlp = nn.Sequential(
            nn.Linear(c0, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.stem = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chs = [c0]
        ch = c0
        res = cfg.image_size
        for i, width in enumerate(cfg.channels):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for j in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, width, cfg.time_embed_dim, cfg.groups))
                ch = width
                attns.append(self._maybe_attn(ch, res, f"d{i}a{j}"))
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if i < len(cfg.channels) - 1:
                self.downsamples.append(Downsample(ch))
                skip_chs.append(ch)
                res //= 2

        self.mid_block1 = ResBlock(ch, ch, cfg.time_embed_dim, cfg.groups)
        self.mid_attn = self._maybe_attn(ch, res, "mid")
        self.mid_block2 = ResBlock(ch, ch, cfg.time_embed_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(cfg.channels))):
            width = cfg.channels[i]
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for j in range(cfg.num_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chs.pop(), width, cfg.time_embed_dim, cfg.groups))
                ch = width
                attns.append(self._maybe_attn(ch, res, f"u{i}a{j}"))
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            if i > 0:
                self.upsamples.append(Upsample(ch))
                res *= 2

        self.out_norm = nn.GroupNorm(cfg.groups, ch)
        self.out_conv = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _maybe_attn(self, ch: int, res: int, site: str) -> nn.Module:
        if res in self.config.attention_resolutions:
            return AttentionBlock(ch, self.config.heads, self.config.groups, site)
        return nn.Identity()

    def attention_sites(self) -> list[tuple[str, int, int]]:
        """All (site name, channel width, resolution) attention placements, in order."""
        cfg = self.config
        sites = []
        res = cfg.image_size
        ch = None
        for i, width in enumerate(cfg.channels):
            if res in cfg.attention_resolutions:
                sites.extend((f"d{i}a{j}", width, res) for j in range(cfg.num_res_blocks))
            if i < len(cfg.channels) - 1:
                res //= 2
        if res in cfg.attention_resolutions:
            sites.append(("mid", cfg.channels[-1], res))
        for i in reversed(range(len(cfg.channels))):
            if res in cfg.attention_resolutions:
                sites.extend((f"u{i}a{j}", cfg.channels[i], res) for j in range(cfg.num_res_blocks + 1))
            if i > 0:
                res *= 2
        return sites

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: "_ForwardContext | None" = None) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.config.channels[0]))
        h = self.stem(x)
        skips = [h]
        for i, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attns)):
            for block, attn in zip(blocks, attns):
                h = block(h, temb)
                h = attn(h, ctx) if isinstance(attn, AttentionBlock) else h
                skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                skips.append(h)
        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, ctx) if isinstance(self.mid_attn, AttentionBlock) else h
        h = self.mid_block2(h, temb)
        for i, (blocks, attns) in enumerate(zip(self.up_blocks, self.up_attns)):
            for block, attn in zip(blocks, attns):
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
                h = attn(h, ctx) if isinstance(attn, AttentionBlock) else h
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


class AdapterState(nn.Module):
    """Everything added on top of the backbone: embeddings, prompts, blocks."""

    def __init__(self, config: AdapterConfig, sites: list[tuple[str, int, int]]):
        super().__init__()
        self.config = config
        self.table = ClassEmbeddingTable(config.num_classes, config.d_base)
        self.prompts = TaskPromptSet(config.prompt_count)
        self.context = ContextTokenTable(config.num_classes, config.d_base) if config.use_context_tokens else None
        self.layout_blocks = nn.ModuleDict()
        self.site_resolutions = {}
        for site, width, res in sites:
            self.prompts.add_site(site, width)
            self.layout_blocks[site] = LayoutAttentionBlock(
                width, site, self.table, heads=config.layout_heads)
            if self.context is not None:
                self.context.add_site(site, width)
            self.site_resolutions[site] = res


class _ForwardContext:
    """Per-forward bundle of layout-derived inputs for adapted attention sites."""

    def __init__(self, state: AdapterState, layouts: list[Layout]):
        self.state = state
        self.layouts = layouts
        self._regions: dict[tuple[int, int], list] = {}
        ids = [sorted({inst.class_id for inst in lay.instances}) for lay in layouts]
        rmax = max((len(v) for v in ids), default=0)
        if rmax == 0 or state.context is None:
            self.token_ids = None
            self.token_valid = None
        else:
            self.token_ids = torch.zeros(len(layouts), rmax, dtype=torch.long)
            self.token_valid = torch.zeros(len(layouts), rmax, dtype=torch.bool)
            for b, present in enumerate(ids):
                if present:
                    self.token_ids[b, : len(present)] = torch.tensor(present)
                    self.token_valid[b, : len(present)] = True

    def regions_for(self, resolution: tuple[int, int]) -> list:
        regs = self._regions.get(resolution)
        if regs is None:
            regs = [cached_rasterize(lay, resolution) for lay in self.layouts]
            self._regions[resolution] = regs
        return regs

    def context_for(self, site: str, dtype) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if self.token_ids is None:
            return None, None
        table = self.state.context.site_table(site).to(dtype=dtype)
        return table[self.token_ids], self.token_valid


class DenoiserModel(nn.Module):
    """Backbone plus optional adapters, with a mode flag selecting the input path.

    Modes: ``unconditional`` (backbone only, layouts ignored), ``adapted``
    (prompts + layout attention), ``concat_baseline`` (layout enters as
    extra input channels).
    """

    MODES = ("unconditional", "adapted", "concat_baseline")

    def __init__(self, config: UNetConfig, mode: str = "unconditional",
                 adapter_config: AdapterConfig | None = None,
                 num_classes: int | None = None):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "adapted" and adapter_config is None:
            raise ValueError("adapted mode requires an adapter config")
        if mode == "concat_baseline" and num_classes is None:
            raise ValueError("concat_baseline mode requires num_classes")
        self.config = config
        self.mode = mode
        self.adapter_config = adapter_config
        self.num_classes = adapter_config.num_classes if adapter_config else num_classes
        self.backbone = UNet(config)
        self.adapter = AdapterState(adapter_config, self.backbone.attention_sites()) if mode == "adapted" else None

    def _layout_list(self, layouts, batch: int) -> list[Layout]:
        if layouts is None:
            raise ValueError(f"{self.mode} mode requires a layout (the empty layout is allowed)")
        if isinstance(layouts, Layout):
            layouts = [layouts] * batch
        layouts = list(layouts)
        if len(layouts) != batch:
            raise ValueError(f"got {len(layouts)} layouts for batch of {batch}")
        for lay in layouts:
            if lay.num_classes != self.num_classes:
                raise ValueError(f"layout has {lay.num_classes} classes, model expects {self.num_classes}")
        return layouts

    def forward(self, x_t: torch.Tensor, t, layouts=None) -> torch.Tensor:
        single = x_t.ndim == 3
        x = x_t.unsqueeze(0) if single else x_t
        if x.ndim != 4:
            raise ValueError(f"x_t must be (C, H, W) or (B, C, H, W), got {tuple(x_t.shape)}")
        b = x.shape[0]
        if x.shape[2] != self.config.image_size or x.shape[3] != self.config.image_size:
            raise ValueError(f"expected {self.config.image_size}x{self.config.image_size} input")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        t_tensor = torch.from_numpy(t_arr.copy())
        ctx = None
        if self.mode == "adapted":
            ctx = _ForwardContext(self.adapter, self._layout_list(layouts, b))
        elif self.mode == "concat_baseline":
            lays = self._layout_list(layouts, b)
            hw = (x.shape[2], x.shape[3])
            chans = torch.stack([to_channel_mask(lay, hw) for lay in lays]).to(x.dtype)
            x = torch.cat([x, chans], dim=1)
        out = self.backbone(x, t_tensor, ctx)
        return out.squeeze(0) if single else out


def predict_noise(model: DenoiserModel, x_t: torch.Tensor, t, layout=None) -> torch.Tensor:
    """Noise prediction for x_t at step t; layout handling depends on model mode."""
    return model(x_t, t, layout)


def insert_adapters(backbone_model: DenoiserModel, num_classes: int,
                    adapter_config: AdapterConfig | None = None) -> DenoiserModel:
    """Wrap an unconditional backbone with freshly initialized adapters.

    Backbone weights are copied bitwise; layout-attention output layers and
    prompt gates start at zero, so the adapted model's predictions initially
    equal the backbone's.
    """
    if backbone_model.mode != "unconditional":
        raise ValueError(f"can only insert adapters into an unconditional model, not {backbone_model.mode!r}")
    if adapter_config is None:
        adapter_config = AdapterConfig(num_classes=num_classes)
    elif adapter_config.num_classes != num_classes:
        raise ValueError("num_classes disagrees with adapter_config")
    adapted = DenoiserModel(backbone_model.config, mode="adapted", adapter_config=adapter_config)
    adapted = adapted.to(dtype=next(backbone_model.parameters()).dtype)
    adapted.backbone.load_state_dict(copy.deepcopy(backbone_model.backbone.state_dict()))
    return adapted


def to_concat_baseline(backbone_model: DenoiserModel, num_classes: int) -> DenoiserModel:
    """Rebuild the backbone with (K+1) extra zero-initialized input channels."""
    if backbone_model.mode != "unconditional":
        raise ValueError(f"can only convert an unconditional model, not {backbone_model.mode!r}")
    cfg = backbone_model.config
    wide = UNetConfig(
        image_size=cfg.image_size,
        in_channels=cfg.in_channels + num_classes + 1,
        out_channels=cfg.out_channels,
        channels=cfg.channels,
        attention_resolutions=cfg.attention_resolutions,
        num_res_blocks=cfg.num_res_blocks,
        time_embed_dim=cfg.time_embed_dim,
        heads=cfg.heads,
        groups=cfg.groups,
    )
    model = DenoiserModel(wide, mode="concat_baseline", num_classes=num_classes)
    model = model.to(dtype=next(backbone_model.parameters()).dtype)
    state = copy.deepcopy(backbone_model.backbone.state_dict())
    stem_w = torch.zeros_like(model.backbone.stem.weight)
    stem_w[:, : cfg.in_channels] = state["stem.weight"]
    state["stem.weight"] = stem_w
    model.backbone.load_state_dict(state)
    return model


@dataclass
class ParamReport:
    """Parameter counts by group, plus the adapter overhead percentage."""

    backbone_params: int
    adapter_params: int
    per_group: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return self.backbone_params + self.adapter_params

    @property
    def overhead_percent(self) -> float:
        return 100.0 * self.adapter_params / self.backbone_params

    def __str__(self) -> str:
        lines = [
            f"backbone parameters: {self.backbone_params}",
            f"adapter parameters:  {self.adapter_params}",
            f"adapter overhead:    {self.overhead_percent:.2f}%",
        ]
        return "\n".join(lines)


def param_report(model: DenoiserModel) -> ParamReport:
    """Count parameters per top-level group (backbone vs adapter)."""
    backbone = 0
    adapter = 0
    per_group: dict[str, int] = {}
    for name, p in model.named_parameters():
        n = p.numel()
        group = name.split(".")[0]
        per_group[group] = per_group.get(group, 0) + n
        if name.startswith("backbone."):
            backbone += n
        elif name.startswith("adapter."):
            adapter += n
        else:
            raise RuntimeError(f"parameter {name!r} belongs to no known group")
    return ParamReport(backbone_params=backbone, adapter_params=adapter, per_group=per_group)
