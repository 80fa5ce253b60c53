"""Layout-fidelity and distribution metrics for generated images.

All metrics rest on the dataset's canonical palette: a pixel's class is the
nearest palette color (background gray included), so no trained classifier
is needed. Layout mIoU scores agreement with the conditioning regions, the
box score is a detection-style precision/recall over connected components,
and the Fréchet feature distance compares Gaussian fits of hand-crafted
28-dimensional image features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .dataset import background_color, palette, tensor_to_image
from .layout import Layout, cached_rasterize

__all__ = [
    "MetricReport",
    "segment_by_palette",
    "layout_miou",
    "box_score",
    "image_features",
    "frechet_gaussian_distance",
    "frechet_feature_distance",
    "evaluate",
]


@dataclass
class MetricReport:
    """Bundle of all metric values over one evaluated set."""

    miou: float
    box_precision: float
    box_recall: float
    ffd: float
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "miou": self.miou,
            "box_precision": self.box_precision,
            "box_recall": self.box_recall,
            "ffd": self.ffd,
            "n_samples": self.n_samples,
        }

    def __str__(self) -> str:
        return (f"miou={self.miou:.4f} box_p={self.box_precision:.4f} "
                f"box_r={self.box_recall:.4f} ffd={self.ffd:.4f} n={self.n_samples}")


def _as_hwc(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = tensor_to_image(image)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    return image


def segment_by_palette(image, num_classes: int) -> np.ndarray:
    """Per-pixel nearest color among the K class colors plus background.

    Returns (H, W) int64 labels; index K is background. Ties go to the
    lower index.
    """
    img = _as_hwc(image)
    colors = np.concatenate([palette(num_classes), background_color()[None, :]])
    dists = ((img[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dists, axis=-1)


def _class_gt_masks(layout: Layout) -> dict[int, np.ndarray]:
    regions = cached_rasterize(layout, layout.canvas)
    out: dict[int, np.ndarray] = {}
    for m, k in zip(regions.instance_masks, regions.class_ids):
        out[k] = np.maximum(out[k], m) if k in out else m.copy()
    return out


def layout_miou(images, layouts) -> float:
    """Mean IoU between palette segmentation and the conditioning regions.

    Per sample the IoU is averaged over the classes present in the layout;
    an empty layout is scored by its background IoU. The result is the mean
    over samples.
    """
    images = list(images)
    layouts = list(layouts)
    if len(images) != len(layouts):
        raise ValueError(f"{len(images)} images vs {len(layouts)} layouts")
    scores = []
    for image, layout in zip(images, layouts):
        seg = segment_by_palette(image, layout.num_classes)
        if layout.is_empty:
            pred_bg = seg == layout.num_classes
            scores.append(pred_bg.mean())  # GT background is everything
            continue
        ious = []
        for k, gt in _class_gt_masks(layout).items():
            pred = seg == k
            gt = gt.astype(bool)
            union = (pred | gt).sum()
            ious.append((pred & gt).sum() / union if union else 1.0)
        scores.append(float(np.mean(ious)))
    return float(np.mean(scores))


def _visible_masks(layout: Layout) -> list[np.ndarray]:
    """Per-instance region minus everything drawn later (painter's order)."""
    regions = cached_rasterize(layout, layout.canvas)
    masks = regions.instance_masks.astype(bool)
    visible = []
    for i in range(len(masks)):
        vis = masks[i].copy()
        for j in range(i + 1, len(masks)):
            vis &= ~masks[j]
        visible.append(vis)
    return visible


def box_score(images, layouts, tau: float = 0.5,
              min_component_area: float = 0.02) -> tuple[float, float]:
    """Detection-style (precision, recall) of layout regions in the images.

    Recall: an instance counts as recovered when at least ``tau`` of its
    visible pixels classify to its class; fully occluded instances are
    excluded. Precision: connected components of each predicted class
    covering at least ``min_component_area`` of the canvas must overlap
    (IoU >= 0.5) a same-class visible region or the class's visible union
    (the union case covers components that merge adjacent instances).
    Counts are pooled over all samples; precision is 1.0 with no detections.
    """
    images = list(images)
    layouts = list(layouts)
    if len(images) != len(layouts):
        raise ValueError(f"{len(images)} images vs {len(layouts)} layouts")
    recovered = 0
    total_gt = 0
    matched_components = 0
    total_components = 0
    for image, layout in zip(images, layouts):
        seg = segment_by_palette(image, layout.num_classes)
        h, w = seg.shape
        min_pixels = min_component_area * h * w
        visible = _visible_masks(layout)
        by_class: dict[int, list[np.ndarray]] = {}
        for inst, vis in zip(layout.instances, visible):
            if not vis.any():
                continue  # fully occluded
            total_gt += 1
            covered = (seg[vis] == inst.class_id).mean()
            if covered >= tau:
                recovered += 1
            by_class.setdefault(inst.class_id, []).append(vis)
        for k in range(layout.num_classes):
            pred_k = seg == k
            if not pred_k.any():
                continue
            labels, n_comp = ndimage.label(pred_k)
            candidates = by_class.get(k, [])
            if len(candidates) > 1:
                candidates = candidates + [np.logical_or.reduce(candidates)]
            for comp_id in range(1, n_comp + 1):
                comp = labels == comp_id
                if comp.sum() < min_pixels:
                    continue
                total_components += 1
                for cand in candidates:
                    inter = (comp & cand).sum()
                    union = (comp | cand).sum()
                    if union and inter / union >= 0.5:
                        matched_components += 1
                        break
    precision = matched_components / total_components if total_components else 1.0
    recall = recovered / total_gt if total_gt else 0.0
    return float(precision), float(recall)


N_FEATURES = 28
_HIST_BINS = 8


def image_features(image) -> np.ndarray:
    """28-dim feature vector: channel means, per-channel histograms, gradient mean."""
    img = _as_hwc(image)
    feats = [img.mean(axis=(0, 1))]
    for c in range(3):
        hist, _ = np.histogram(img[:, :, c], bins=_HIST_BINS, range=(-1.0, 1.0))
        feats.append(hist / img[:, :, c].size)
    gray = img.mean(axis=2)
    gx = np.diff(gray, axis=1)[:-1, :]
    gy = np.diff(gray, axis=0)[:, :-1]
    feats.append(np.array([np.sqrt(gx ** 2 + gy ** 2).mean()]))
    return np.concatenate(feats)


def frechet_gaussian_distance(mu1: np.ndarray, cov1: np.ndarray,
                              mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Wasserstein-2 distance squared between two Gaussians.

    ||mu1-mu2||^2 + tr(cov1 + cov2 - 2(cov1 cov2)^(1/2)), with the matrix
    square root computed by eigendecomposition of the symmetrized product
    and negative eigenvalues (numerical noise) clipped at zero.
    """
    diff = mu1 - mu2
    vals1, vecs1 = np.linalg.eigh((cov1 + cov1.T) / 2.0)
    root1 = (vecs1 * np.sqrt(np.clip(vals1, 0.0, None))) @ vecs1.T
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt
    return float(max(dist, 0.0))


def frechet_feature_distance(real_images, generated_images) -> float:
    """Fréchet distance between Gaussian fits of the two sets' features."""
    real = np.stack([image_features(im) for im in real_images])
    gen = np.stack([image_features(im) for im in generated_images])
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("each set needs at least 2 images")
    reg = 1e-6 * np.eye(N_FEATURES)
    mu1, cov1 = real.mean(axis=0), np.cov(real, rowvar=False) + reg
    mu2, cov2 = gen.mean(axis=0), np.cov(gen, rowvar=False) + reg
    return frechet_gaussian_distance(mu1, cov1, mu2, cov2)


def evaluate(generated_images, layouts, real_images) -> MetricReport:
    """All metrics for one generated set against its layouts and a real set."""
    generated_images = list(generated_images)
    miou = layout_miou(generated_images, layouts)
    precision, recall = box_score(generated_images, layouts)
    ffd = frechet_feature_distance(real_images, generated_images)
    return MetricReport(miou=miou, box_precision=precision, box_recall=recall,
                        ffd=ffd, n_samples=len(generated_images))
