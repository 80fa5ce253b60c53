"""Procedural shape/layout dataset, its on-disk format, and a bbox importer.

Each sample is a gray canvas with 1-5 colored shapes (rectangles for even
classes, ellipses for odd) drawn in painter's order. Class colors sit at
maximally separated RGB-cube corners, so a nearest-color classifier can
recover the segmentation, which is what the evaluation metrics rely on.
Images are quantized to the 8-bit grid at generation time, making the
PPM round trip bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .layout import Instance, Layout, load_layout, save_layout
from .netpbm import float_to_u8, read_pgm, read_ppm, u8_to_float, write_pgm, write_ppm
from .numerics import SeededRng

__all__ = [
    "MAX_CLASSES",
    "BACKGROUND_INDEX_VALUE",
    "palette",
    "background_color",
    "ShapeSpec",
    "SampleRecord",
    "Dataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "import_bbox_annotations",
    "image_to_tensor",
    "tensor_to_image",
]

# RGB-cube corners in [-1, 1], ordered so small K picks well-separated hues.
_PALETTE_CORNERS = np.array([
    (1.0, -1.0, -1.0),   # red
    (-1.0, 1.0, -1.0),   # green
    (-1.0, -1.0, 1.0),   # blue
    (1.0, 1.0, -1.0),    # yellow
    (1.0, -1.0, 1.0),    # magenta
    (-1.0, 1.0, 1.0),    # cyan
    (1.0, 1.0, 1.0),     # white
    (-1.0, -1.0, -1.0),  # black
])

MAX_CLASSES = len(_PALETTE_CORNERS)
BACKGROUND_INDEX_VALUE = 255  # index-map value for uncovered pixels

MIN_SIDE = 0.15
MAX_SIDE = 0.6
MAX_INSTANCES = 5
BRIGHTNESS_JITTER = 0.1
BACKGROUND_NOISE_STD = 0.02


def palette(num_classes: int) -> np.ndarray:
    """(K, 3) canonical class colors in [-1, 1]."""
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in 1..{MAX_CLASSES}")
    return _PALETTE_CORNERS[:num_classes].copy()


def background_color() -> np.ndarray:
    """Mid-gray background color in [-1, 1]."""
    return np.zeros(3)


@dataclass(frozen=True)
class ShapeSpec:
    """One shape to draw: class, kind (decided by class parity), bbox, jitter."""

    class_id: int
    bbox: tuple[float, float, float, float]
    brightness: float

    @property
    def kind(self) -> str:
        return "rectangle" if self.class_id % 2 == 0 else "ellipse"


@dataclass
class SampleRecord:
    """A rendered image with its conditioning layout and visibility map.

    ``index_map`` assigns every pixel the index of the topmost instance
    covering it (255 = background); it is None for imported data without
    ground-truth masks.
    """

    id: int
    image: np.ndarray  # (H, W, 3) float64 in [-1, 1]
    layout: Layout
    index_map: np.ndarray | None = None

    def class_map(self) -> np.ndarray:
        """(H, W) per-pixel class ids, with K marking background."""
        if self.index_map is None:
            raise ValueError("record has no index map")
        k_bg = self.layout.num_classes
        out = np.full(self.index_map.shape, k_bg, dtype=np.int64)
        for i, inst in enumerate(self.layout.instances):
            out[self.index_map == i] = inst.class_id
        return out


@dataclass
class Dataset:
    num_classes: int
    canvas: tuple[int, int]
    records: list[SampleRecord]

    def __len__(self) -> int:
        return len(self.records)


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cy = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    cx = (np.arange(w, dtype=np.float64)[None, :] + 0.5) / w
    return cy, cx


def _shape_coverage(spec: ShapeSpec, h: int, w: int) -> np.ndarray:
    x0, y0, x1, y1 = spec.bbox
    cy, cx = _pixel_centers(h, w)
    if spec.kind == "rectangle":
        return (x0 <= cx) & (cx < x1) & (y0 <= cy) & (cy < y1)
    mx, my = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    rx, ry = (x1 - x0) / 2.0, (y1 - y0) / 2.0
    return ((cx - mx) / rx) ** 2 + ((cy - my) / ry) ** 2 <= 1.0


def _jittered_color(class_id: int, num_classes: int, brightness: float) -> np.ndarray:
    c01 = (palette(num_classes)[class_id] + 1.0) / 2.0
    return np.clip(c01 * brightness, 0.0, 1.0) * 2.0 - 1.0


def _render(specs: list[ShapeSpec], num_classes: int, h: int, w: int,
            noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = background_color()[None, None, :] + noise * BACKGROUND_NOISE_STD
    img = np.clip(img, -1.0, 1.0)
    index_map = np.full((h, w), BACKGROUND_INDEX_VALUE, dtype=np.uint8)
    for i, spec in enumerate(specs):
        cover = _shape_coverage(spec, h, w)
        img[cover] = _jittered_color(spec.class_id, num_classes, spec.brightness)
        index_map[cover] = i
    img = u8_to_float(float_to_u8(img))
    return img, index_map


def _draw_specs(rng: SeededRng, num_classes: int) -> list[ShapeSpec]:
    n_inst = int(rng.integers(1, MAX_INSTANCES + 1))
    specs = []
    for _ in range(n_inst):
        class_id = int(rng.integers(0, num_classes))
        bw = float(rng.uniform(MIN_SIDE, MAX_SIDE))
        bh = float(rng.uniform(MIN_SIDE, MAX_SIDE))
        x0 = float(rng.uniform(0.0, 1.0 - bw))
        y0 = float(rng.uniform(0.0, 1.0 - bh))
        brightness = float(rng.uniform(1.0 - BRIGHTNESS_JITTER, 1.0 + BRIGHTNESS_JITTER))
        specs.append(ShapeSpec(class_id=class_id, bbox=(x0, y0, x0 + bw, y0 + bh),
                               brightness=brightness))
    return specs


def generate_sample(sample_id: int, num_classes: int, canvas: tuple[int, int],
                    seed: int) -> SampleRecord:
    """Deterministically render sample ``sample_id`` of the synthetic set."""
    h, w = canvas
    rng = SeededRng(seed).child("sample").child(sample_id)
    specs = _draw_specs(rng, num_classes)
    noise = rng.normal((h, w, 3))
    img, index_map = _render(specs, num_classes, h, w, noise)
    instances = tuple(Instance(class_id=s.class_id, bbox=s.bbox) for s in specs)
    layout = Layout(canvas=canvas, num_classes=num_classes, instances=instances)
    return SampleRecord(id=sample_id, image=img, layout=layout, index_map=index_map)


def generate_dataset(n: int, num_classes: int = 6, canvas: int | tuple[int, int] = 32,
                     seed: int = 0) -> Dataset:
    """n procedurally generated samples; each is a pure function of (seed, id)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(canvas, int):
        canvas = (canvas, canvas)
    records = [generate_sample(i, num_classes, canvas, seed) for i in range(n)]
    return Dataset(num_classes=num_classes, canvas=canvas, records=records)


DATASET_VERSION = 1


def save_dataset(dataset: Dataset, path) -> None:
    """Write manifest.json, images/NNNN.ppm, masks/NNNN.pgm, layouts/NNNN.json."""
    root = Path(path)
    for sub in ("images", "masks", "layouts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        stem = f"{rec.id:04d}"
        write_ppm(root / "images" / f"{stem}.ppm", float_to_u8(rec.image))
        if rec.index_map is not None:
            write_pgm(root / "masks" / f"{stem}.pgm", rec.index_map)
        save_layout(rec.layout, root / "layouts" / f"{stem}.json")
    manifest = {
        "version": DATASET_VERSION,
        "num_classes": dataset.num_classes,
        "canvas": list(dataset.canvas),
        "count": len(dataset.records),
        "ids": [rec.id for rec in dataset.records],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(path) -> Dataset:
    """Inverse of ``save_dataset``; bit-exact for generated datasets."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    canvas = tuple(int(v) for v in manifest["canvas"])
    num_classes = int(manifest["num_classes"])
    records = []
    for rid in manifest["ids"]:
        stem = f"{rid:04d}"
        image = u8_to_float(read_ppm(root / "images" / f"{stem}.ppm"))
        layout = load_layout(root / "layouts" / f"{stem}.json", num_classes=num_classes)
        mask_path = root / "masks" / f"{stem}.pgm"
        index_map = read_pgm(mask_path) if mask_path.exists() else None
        records.append(SampleRecord(id=rid, image=image, layout=layout, index_map=index_map))
    if len(records) != manifest["count"]:
        raise ValueError(f"manifest count {manifest['count']} != {len(records)} records")
    return Dataset(num_classes=num_classes, canvas=canvas, records=records)


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape[:2]
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(np.int64), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(np.int64), sw - 1)
    return img[rows[:, None], cols[None, :]]


def import_bbox_annotations(annotations_path, image_dir, canvas: int | tuple[int, int] = 32,
                            num_classes: int = 6, min_area: float = 0.02,
                            min_instances: int = 1, max_instances: int = 8) -> tuple[Dataset, int]:
    """Build a dataset from external bbox annotations plus image files.

    The annotation file is a JSON array of layout documents, each with an
    extra "image" key naming a file in ``image_dir``. Instances smaller
    than ``min_area`` of the canvas are dropped; samples whose remaining
    instance count falls outside [min_instances, max_instances] are
    excluded. Returns (dataset, skipped_count); missing image files are
    counted as skipped.
    """
    if isinstance(canvas, int):
        canvas = (canvas, canvas)
    entries = json.loads(Path(annotations_path).read_text())
    records = []
    skipped = 0
    for i, entry in enumerate(entries):
        img_path = Path(image_dir) / entry["image"]
        if not img_path.exists():
            skipped += 1
            continue
        kept = []
        for inst in entry["instances"]:
            x0, y0, x1, y1 = inst["bbox"]
            if (x1 - x0) * (y1 - y0) >= min_area:
                kept.append(Instance(class_id=int(inst["class"]), bbox=(x0, y0, x1, y1)))
        if not min_instances <= len(kept) <= max_instances:
            skipped += 1
            continue
        raw = u8_to_float(read_ppm(img_path))
        image = _resize_nearest(raw, canvas[0], canvas[1])
        layout = Layout(canvas=canvas, num_classes=num_classes, instances=tuple(kept))
        records.append(SampleRecord(id=i, image=image, layout=layout))
    return Dataset(num_classes=num_classes, canvas=canvas, records=records), skipped


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [-1, 1] -> float32 (3, H, W) tensor."""
    return torch.from_numpy(np.moveaxis(image, -1, 0).copy()).to(torch.float32)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """float (3, H, W) tensor -> (H, W, 3) float64 array."""
    return np.moveaxis(t.detach().cpu().numpy().astype(np.float64), 0, -1)
