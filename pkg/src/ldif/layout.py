"""Layout data model and rasterization to per-resolution region masks.

A layout is an ordered list of class-labeled instances over a pixel canvas.
Each instance carries either a normalized bounding box or a full-resolution
binary mask. ``rasterize`` turns a layout into binary region masks at an
arbitrary feature resolution; these drive the regional attention blocks and
the channel-mask encoding used by the concatenation baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .netpbm import read_pgm, write_pgm

__all__ = [
    "Instance",
    "Layout",
    "RegionMaskSet",
    "rasterize",
    "cached_rasterize",
    "to_channel_mask",
    "save_layout",
    "load_layout",
]


@dataclass(frozen=True)
class Instance:
    """One labeled region: a bbox (x0, y0, x1, y1 in [0, 1]) or a binary mask.

    Exactly one of ``bbox`` and ``mask`` is set. Masks are uint8 arrays at
    canvas resolution with nonzero meaning covered.
    """

    class_id: int
    bbox: tuple[float, float, float, float] | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if (self.bbox is None) == (self.mask is None):
            raise ValueError("exactly one of bbox and mask must be given")
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            ok = 0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0
            if not ok:
                raise ValueError(f"bbox must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1, got {self.bbox}")
            object.__setattr__(self, "bbox", (float(x0), float(y0), float(x1), float(y1)))
        else:
            m = np.asarray(self.mask)
            if m.ndim != 2:
                raise ValueError(f"mask must be 2-D, got shape {m.shape}")
            if not m.any():
                raise ValueError("mask must cover at least one pixel")
            m = (m != 0).astype(np.uint8)
            m.flags.writeable = False
            object.__setattr__(self, "mask", m)

    def _key(self):
        if self.bbox is not None:
            return (self.class_id, self.bbox)
        digest = hashlib.sha256(self.mask.tobytes()).hexdigest()[:16]
        return (self.class_id, self.mask.shape, digest)


@dataclass(frozen=True)
class Layout:
    """Canvas size, class count, and an ordered (possibly empty) instance list.

    The empty layout is valid and serves as the negative condition for
    classifier-free guidance.
    """

    canvas: tuple[int, int]
    num_classes: int
    instances: tuple[Instance, ...] = ()

    def __post_init__(self):
        h, w = self.canvas
        if h < 1 or w < 1:
            raise ValueError(f"canvas must be positive, got {self.canvas}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        object.__setattr__(self, "canvas", (int(h), int(w)))
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.class_id >= self.num_classes:
                raise ValueError(f"class_id {inst.class_id} out of range for K={self.num_classes}")
            if inst.mask is not None and inst.mask.shape != self.canvas:
                raise ValueError(f"mask shape {inst.mask.shape} != canvas {self.canvas}")

    @property
    def is_empty(self) -> bool:
        return len(self.instances) == 0

    @classmethod
    def empty(cls, num_classes: int, canvas: tuple[int, int]) -> "Layout":
        return cls(canvas=canvas, num_classes=num_classes)

    def cache_key(self):
        """Hashable identity used to cache rasterizations."""
        return (self.canvas, self.num_classes, tuple(i._key() for i in self.instances))


@dataclass(frozen=True)
class RegionMaskSet:
    """Binary instance masks plus the derived background mask at one resolution."""

    resolution: tuple[int, int]
    instance_masks: np.ndarray  # (n, h, w) uint8, n may be 0
    background_mask: np.ndarray  # (h, w) uint8
    class_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        h, w = self.resolution
        if self.instance_masks.shape[1:] != (h, w) or self.background_mask.shape != (h, w):
            raise ValueError("mask shapes do not match resolution")
        if len(self.class_ids) != self.instance_masks.shape[0]:
            raise ValueError("class_ids length must match instance count")
        self.instance_masks.flags.writeable = False
        self.background_mask.flags.writeable = False


def _bbox_raster(bbox, h: int, w: int) -> np.ndarray:
    """Pixel-center containment, half-open on the high edges."""
    x0, y0, x1, y1 = bbox
    cx = (np.arange(w, dtype=np.float64) + 0.5) / w
    cy = (np.arange(h, dtype=np.float64) + 0.5) / h
    col = (x0 <= cx) & (cx < x1)
    row = (y0 <= cy) & (cy < y1)
    return (row[:, None] & col[None, :]).astype(np.uint8)


def _interp_1d(table: np.ndarray, coords: np.ndarray, n: int) -> np.ndarray:
    """Linearly interpolate the leading axis of ``table`` (length n+1) at ``coords``."""
    lo = np.minimum(coords.astype(np.int64), n - 1)
    frac = coords - lo
    shape = (-1,) + (1,) * (table.ndim - 1)
    return (1.0 - frac).reshape(shape) * table[lo] + frac.reshape(shape) * table[lo + 1]


def _mask_raster(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-majority downsample: target pixel is 1 iff >= 50% of its footprint is covered.

    The coverage integral is exact: the prefix-sum table of a pixel grid is
    bilinear within each source cell, so evaluating it at fractional cell
    boundaries gives exact box sums.
    """
    mh, mw = mask.shape
    prefix = np.zeros((mh + 1, mw + 1), dtype=np.float64)
    prefix[1:, 1:] = mask.astype(np.float64).cumsum(0).cumsum(1)
    ys = np.arange(h + 1, dtype=np.float64) * mh / h
    xs = np.arange(w + 1, dtype=np.float64) * mw / w
    rows = _interp_1d(prefix, ys, mh)
    grid = _interp_1d(rows.T, xs, mw).T
    area = grid[1:, 1:] - grid[:-1, 1:] - grid[1:, :-1] + grid[:-1, :-1]
    cell = (mh / h) * (mw / w)
    return (area / cell >= 0.5 - 1e-9).astype(np.uint8)


def _centroid_pixel(inst: Instance, canvas, h: int, w: int) -> tuple[int, int]:
    if inst.bbox is not None:
        x0, y0, x1, y1 = inst.bbox
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    else:
        ys, xs = np.nonzero(inst.mask)
        mh, mw = inst.mask.shape
        cy = float((ys + 0.5).mean()) / mh
        cx = float((xs + 0.5).mean()) / mw
    return min(int(cy * h), h - 1), min(int(cx * w), w - 1)


def rasterize(layout: Layout, resolution: tuple[int, int]) -> RegionMaskSet:
    """Render every instance to a binary mask at ``resolution``.

    Bboxes use the pixel-center rule; canvas-resolution masks are
    downsampled by area majority. An instance whose raster would be empty
    gets its centroid pixel set so it stays visible at coarse resolutions.
    The background mask is the complement of the union of instance masks.
    """
    h, w = int(resolution[0]), int(resolution[1])
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    masks = np.zeros((len(layout.instances), h, w), dtype=np.uint8)
    for n, inst in enumerate(layout.instances):
        if inst.bbox is not None:
            m = _bbox_raster(inst.bbox, h, w)
        else:
            m = _mask_raster(inst.mask, h, w)
        if not m.any():
            i, j = _centroid_pixel(inst, layout.canvas, h, w)
            m[i, j] = 1
        masks[n] = m
    covered = masks.max(axis=0) if len(masks) else np.zeros((h, w), dtype=np.uint8)
    background = (1 - covered).astype(np.uint8)
    class_ids = tuple(inst.class_id for inst in layout.instances)
    return RegionMaskSet(resolution=(h, w), instance_masks=masks,
                         background_mask=background, class_ids=class_ids)


_RASTER_CACHE: dict = {}
_RASTER_CACHE_MAX = 8192


def cached_rasterize(layout: Layout, resolution: tuple[int, int]) -> RegionMaskSet:
    """``rasterize`` with memoization; safe because results are immutable."""
    key = (layout.cache_key(), (int(resolution[0]), int(resolution[1])))
    hit = _RASTER_CACHE.get(key)
    if hit is None:
        if len(_RASTER_CACHE) >= _RASTER_CACHE_MAX:
            _RASTER_CACHE.clear()
        hit = rasterize(layout, resolution)
        _RASTER_CACHE[key] = hit
    return hit


def to_channel_mask(layout: Layout, resolution: tuple[int, int]) -> torch.Tensor:
    """Encode a layout as (K+1, h, w) class-presence channels.

    Channel k is the union of masks of instances with class k; channel K is
    the background. This is the input encoding of the channel-concatenation
    baseline.
    """
    regions = cached_rasterize(layout, resolution)
    h, w = regions.resolution
    out = np.zeros((layout.num_classes + 1, h, w), dtype=np.float32)
    for m, k in zip(regions.instance_masks, regions.class_ids):
        np.maximum(out[k], m, out=out[k])
    out[layout.num_classes] = regions.background_mask
    return torch.from_numpy(out)


def save_layout(layout: Layout, path) -> None:
    """Write a layout as JSON; mask instances become sibling PGM files."""
    path = Path(path)
    entries = []
    for n, inst in enumerate(layout.instances):
        if inst.bbox is not None:
            entries.append({"class": inst.class_id, "bbox": list(inst.bbox)})
        else:
            mask_name = f"{path.stem}_mask{n}.pgm"
            write_pgm(path.parent / mask_name, inst.mask * np.uint8(255))
            entries.append({"class": inst.class_id, "mask_file": mask_name})
    doc = {"canvas": list(layout.canvas), "num_classes": layout.num_classes, "instances": entries}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_layout(path, num_classes: int | None = None) -> Layout:
    """Read a layout JSON file; ``num_classes`` overrides/fills the class count."""
    path = Path(path)
    doc = json.loads(path.read_text())
    canvas = tuple(int(v) for v in doc["canvas"])
    instances = []
    for entry in doc["instances"]:
        k = int(entry["class"])
        if "bbox" in entry:
            instances.append(Instance(class_id=k, bbox=tuple(float(v) for v in entry["bbox"])))
        else:
            mask = read_pgm(path.parent / entry["mask_file"])
            instances.append(Instance(class_id=k, mask=mask))
    if num_classes is None:
        stored = doc.get("num_classes")
        num_classes = int(stored) if stored is not None else max((i.class_id for i in instances), default=0) + 1
    return Layout(canvas=canvas, num_classes=num_classes, instances=tuple(instances))
