"""Shared test oracles and generators.

The dense layout-attention oracle reimplements regional attention the
expensive way: one full l x l attention matrix per region with -inf logits
across region boundaries, merged by explicit per-position averaging. The
production kernel gathers regions instead; both must agree to float64
precision on any layout.
"""

import numpy as np
import torch

from ldif.layout import Instance, Layout, rasterize
from ldif.numerics import SeededRng


def np_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dense_layout_attention_oracle(a, regions, block):
    """Masked-dense reference for layout_attention on one (l, d) input."""
    a_np = a.detach().cpu().numpy().astype(np.float64)
    l, d = a_np.shape
    heads = block.heads
    dh = d // heads
    emb = block.table.site_embeddings(block.site).detach().numpy().astype(np.float64)
    wq = block.phi_q.weight.detach().numpy().astype(np.float64)
    wk = block.phi_k.weight.detach().numpy().astype(np.float64)
    wv = block.phi_v.weight.detach().numpy().astype(np.float64)
    wo = block.phi_out.weight.detach().numpy().astype(np.float64)
    bo = block.phi_out.bias.detach().numpy().astype(np.float64)

    branch_masks = []
    branch_embrows = []
    for m, k in zip(regions.instance_masks, regions.class_ids):
        branch_masks.append(m.ravel().astype(bool))
        branch_embrows.append(k)
    bg = regions.background_mask.ravel().astype(bool)
    has_bg = bool(bg.any())
    if has_bg:
        branch_masks.append(bg)
        branch_embrows.append(block.table.null_index)

    results = []
    for mask, row in zip(branch_masks, branch_embrows):
        r = a_np + emb[row][None, :]
        q = r @ wq.T
        k = r @ wk.T
        v = r @ wv.T
        out = np.zeros((l, d))
        for h in range(heads):
            qs = q[:, h * dh:(h + 1) * dh]
            ks = k[:, h * dh:(h + 1) * dh]
            vs = v[:, h * dh:(h + 1) * dh]
            logits = qs @ ks.T / np.sqrt(dh)
            logits[:, ~mask] = -np.inf  # keys outside the region are unreachable
            w = np_softmax(logits[mask], axis=-1)
            out[np.ix_(mask, np.arange(h * dh, (h + 1) * dh))] = w @ vs
        results.append((mask, out))

    merged = np.zeros((l, d))
    n_inst = len(regions.instance_masks)
    counts = np.zeros(l)
    for (mask, out) in results[:n_inst]:
        merged[mask] += out[mask]
        counts += mask
    covered = counts > 0
    merged[covered] /= counts[covered, None]
    if has_bg:
        bg_mask, bg_out = results[-1]
        merged[~covered] = bg_out[~covered]
    return merged @ wo.T + bo[None, :]


def random_layout(rng: SeededRng, canvas=(8, 8), num_classes=6,
                  max_instances=3, allow_empty=True):
    """Random bbox layout; sometimes empty, sometimes overlapping."""
    lo = 0 if allow_empty else 1
    n = int(rng.integers(lo, max_instances + 1))
    instances = []
    for _ in range(n):
        x0 = float(rng.uniform(0.0, 0.7))
        y0 = float(rng.uniform(0.0, 0.7))
        x1 = float(rng.uniform(x0 + 0.2, 1.0))
        y1 = float(rng.uniform(y0 + 0.2, 1.0))
        k = int(rng.integers(0, num_classes))
        instances.append(Instance(class_id=k, bbox=(x0, y0, min(x1, 1.0), min(y1, 1.0))))
    return Layout(canvas=canvas, num_classes=num_classes, instances=instances)


def layout_cases_for_oracle(count, rng: SeededRng, canvas=(6, 6), num_classes=5):
    """A deterministic batch of layouts covering empty, overlap, full-cover."""
    cases = [
        Layout(canvas=canvas, num_classes=num_classes, instances=[]),
        Layout(canvas=canvas, num_classes=num_classes,
               instances=[Instance(class_id=0, bbox=(0.0, 0.0, 1.0, 1.0))]),
        Layout(canvas=canvas, num_classes=num_classes,
               instances=[Instance(class_id=1, bbox=(0.0, 0.0, 0.6, 0.6)),
                          Instance(class_id=2, bbox=(0.4, 0.4, 1.0, 1.0))]),
    ]
    while len(cases) < count:
        cases.append(random_layout(rng, canvas=canvas, num_classes=num_classes))
    return cases[:count]


def rasterized(layout, resolution):
    return rasterize(layout, resolution)


def rand_f64(rng: SeededRng, shape):
    return torch.from_numpy(rng.normal(shape))
