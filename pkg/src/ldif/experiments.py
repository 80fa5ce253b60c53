"""Scaled-down adaptation studies.

Two runnable comparisons back the headline behavior of the adapter design:

* ``efficiency_experiment`` fine-tunes the zero-init adapter model and the
  concatenation baseline from the same pretrained backbone under identical
  budgets, tracking how many epochs each needs to hit a layout mIoU target.
* ``data_efficiency_experiment`` trains the adapter with a frozen backbone on
  small seeded subsets for a fixed number of optimizer steps and compares the
  resulting mIoU against a permuted-layout control.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .dataset import Dataset, image_to_tensor
from .evalmetrics import frechet_feature_distance, layout_miou
from .numerics import SeededRng
from .sampler import SamplerConfig, sample_batch
from .schedule import NoiseSchedule
from .training import TrainConfig, train
from .unet import DenoiserModel, insert_adapters, to_concat_baseline

__all__ = [
    "EvalSettings",
    "VariantRun",
    "EfficiencyReport",
    "DataEfficiencyReport",
    "generate_eval_images",
    "efficiency_experiment",
    "data_efficiency_experiment",
]

EFFICIENCY_VARIANTS = ("adapted", "concat_baseline")


@dataclass(frozen=True)
class EvalSettings:
    """How per-epoch evaluation samples are produced and scored."""

    layouts: tuple
    reference_images: tuple  # (H, W, 3) arrays matching the layouts
    sampler: SamplerConfig = SamplerConfig(kind="ddim", steps=20, cfg_scale=3.0)
    seed: int = 1234
    chunk: int = 16

    def __post_init__(self):
        if len(self.layouts) == 0:
            raise ValueError("need at least one evaluation layout")
        if len(self.reference_images) not in (0, len(self.layouts)):
            raise ValueError("reference_images must be empty or match layouts")


def generate_eval_images(model: DenoiserModel, settings: EvalSettings,
                         sched: NoiseSchedule) -> list[torch.Tensor]:
    """Sample one image per evaluation layout with a fresh seeded stream."""
    rng = SeededRng(settings.seed).child("experiment-eval")
    images: list[torch.Tensor] = []
    layouts = list(settings.layouts)
    for start in range(0, len(layouts), settings.chunk):
        part = layouts[start:start + settings.chunk]
        batch = sample_batch(model, part, settings.sampler, sched, rng.child(f"chunk-{start}"))
        images.extend(batch.unbind(0))
    return images


def _score(model: DenoiserModel, settings: EvalSettings, sched: NoiseSchedule) -> dict:
    images = generate_eval_images(model, settings, sched)
    miou = layout_miou(images, list(settings.layouts))
    ffd = float("nan")
    if len(settings.reference_images) >= 2 and len(images) >= 2:
        ffd = frechet_feature_distance(list(settings.reference_images), images)
    return {"miou": miou, "ffd": ffd}


@dataclass
class VariantRun:
    """Per-epoch metric trace for one fine-tuned variant."""

    variant: str
    rows: list = field(default_factory=list)  # (epoch, miou, ffd)
    epochs_to_threshold: int | None = None

    @property
    def final_miou(self) -> float:
        return self.rows[-1][1] if self.rows else float("nan")

    @property
    def final_ffd(self) -> float:
        return self.rows[-1][2] if self.rows else float("nan")


@dataclass
class EfficiencyReport:
    """Side-by-side fine-tuning traces plus the epochs-to-threshold verdict."""

    threshold: float
    epochs: int
    runs: dict

    def summary(self) -> str:
        lines = [f"layout mIoU threshold {self.threshold} over {self.epochs} epochs"]
        for name in EFFICIENCY_VARIANTS:
            run = self.runs[name]
            hit = run.epochs_to_threshold
            status = f"reached at epoch {hit}" if hit is not None else "not reached"
            lines.append(f"  {name}: {status}, final miou {run.final_miou:.4f}, "
                         f"final ffd {run.final_ffd:.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "efficiency.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "epoch", "miou", "ffd"])
            for name in EFFICIENCY_VARIANTS:
                for epoch, miou, ffd in self.runs[name].rows:
                    writer.writerow([name, epoch, miou, ffd])
        (out / "efficiency_summary.txt").write_text(self.summary() + "\n")


def _load_variant(backbone_ckpt, variant: str, num_classes: int) -> DenoiserModel:
    base = load_checkpoint(backbone_ckpt)
    if base.mode != "unconditional":
        raise ValueError(f"checkpoint must hold an unconditional backbone, got {base.mode!r}")
    if variant == "adapted":
        return insert_adapters(base, num_classes=num_classes)
    if variant == "concat_baseline":
        return to_concat_baseline(base, num_classes=num_classes)
    raise ValueError(f"unknown variant {variant!r}")


def efficiency_experiment(backbone_ckpt, dataset: Dataset, sched: NoiseSchedule,
                          settings: EvalSettings, *, epochs: int = 30,
                          threshold: float = 0.5, batch_size: int = 16,
                          lr: float = 3e-4, seed: int = 0,
                          out_dir=None) -> EfficiencyReport:
    """Fine-tune both conditioning variants from one backbone checkpoint.

    Each variant gets the identical budget (epochs, batch size, lr, data
    order seed). Evaluation runs after every epoch; a variant's
    epochs_to_threshold is the first epoch whose mIoU reaches ``threshold``.
    """
    runs: dict[str, VariantRun] = {}
    for variant in EFFICIENCY_VARIANTS:
        mode = "finetune_adapted" if variant == "adapted" else "finetune_concat_baseline"
        model = _load_variant(backbone_ckpt, variant, dataset.num_classes)
        run = VariantRun(variant=variant)

        def eval_fn(m, epoch, run=run):
            metrics = _score(m, settings, sched)
            run.rows.append((epoch, metrics["miou"], metrics["ffd"]))
            if run.epochs_to_threshold is None and metrics["miou"] >= threshold:
                run.epochs_to_threshold = epoch
            return {"miou": metrics["miou"], "box_score": float("nan"), "ffd": metrics["ffd"]}

        config = TrainConfig(mode=mode, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
        sub_dir = None if out_dir is None else Path(out_dir) / variant
        train(model, dataset, config, sched, eval_fn=eval_fn, out_dir=sub_dir)
        runs[variant] = run
    report = EfficiencyReport(threshold=threshold, epochs=epochs, runs=runs)
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class DataEfficiencyReport:
    """mIoU / Fréchet distance for each training-subset size."""

    iterations: int
    rows: list  # (n_samples, miou, permuted_miou, ffd)
    backbone_unchanged: bool

    def summary(self) -> str:
        lines = [f"adapter-only training for {self.iterations} steps per subset "
                 f"(backbone unchanged: {self.backbone_unchanged})"]
        for n, miou, permuted, ffd in self.rows:
            lines.append(f"  n={n}: miou {miou:.4f} vs permuted-layout {permuted:.4f}, "
                         f"ffd {ffd:.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "data_efficiency.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["n_samples", "iterations", "miou", "permuted_miou", "ffd"])
            for n, miou, permuted, ffd in self.rows:
                writer.writerow([n, self.iterations, miou, permuted, ffd])
        (out / "data_efficiency_summary.txt").write_text(self.summary() + "\n")


def _subset(dataset: Dataset, n: int, rng: SeededRng) -> Dataset:
    if n > len(dataset.records):
        raise ValueError(f"subset size {n} exceeds dataset size {len(dataset.records)}")
    order = rng.permutation(len(dataset.records))
    picked = [dataset.records[i] for i in order[:n]]
    return Dataset(records=picked, num_classes=dataset.num_classes, canvas=dataset.canvas)


def _permuted_miou(images, layouts, rng: SeededRng) -> float:
    """Control score: the same images judged against shuffled layouts."""
    n = len(layouts)
    if n < 2:
        raise ValueError("need at least two layouts to permute")
    perm = rng.permutation(n)
    for _ in range(64):
        if not any(int(p) == i for i, p in enumerate(perm)):
            break
        perm = rng.permutation(n)
    return layout_miou(images, [layouts[int(p)] for p in perm])


def data_efficiency_experiment(backbone_ckpt, dataset: Dataset, sched: NoiseSchedule,
                               settings: EvalSettings, *, sample_counts=(128, 256, 512),
                               iterations: int = 2000, batch_size: int = 16,
                               lr: float = 3e-4, seed: int = 0,
                               out_dir=None) -> DataEfficiencyReport:
    """Adapter-only training on seeded subsets under a fixed step budget.

    The backbone is always frozen here. Per subset size the model trains for
    exactly ``iterations`` optimizer steps (cycling epochs as needed), then
    its samples are scored against their own layouts and against a
    no-fixed-point permutation of those layouts.
    """
    rng = SeededRng(seed).child("data-efficiency")
    rows = []
    backbone_unchanged = True
    for n in sorted(sample_counts):
        subset = _subset(dataset, n, rng.child(f"subset-{n}"))
        model = _load_variant(backbone_ckpt, "adapted", dataset.num_classes)
        before = {k: v.detach().clone() for k, v in model.state_dict().items()
                  if k.startswith("backbone.")}
        steps_per_epoch = max(1, -(-n // batch_size))
        epochs = -(-iterations // steps_per_epoch)
        config = TrainConfig(mode="finetune_adapted", epochs=epochs, lr=lr,
                             batch_size=batch_size, freeze_backbone=True,
                             seed=seed, max_steps=iterations)
        train(model, subset, config, sched)
        after = model.state_dict()
        for k, v in before.items():
            if not torch.equal(v, after[k]):
                backbone_unchanged = False
        images = generate_eval_images(model, settings, sched)
        layouts = list(settings.layouts)
        miou = layout_miou(images, layouts)
        permuted = _permuted_miou(images, layouts, rng.child(f"permute-{n}"))
        ffd = float("nan")
        if len(settings.reference_images) >= 2:
            ffd = frechet_feature_distance(list(settings.reference_images), images)
        rows.append((n, miou, permuted, ffd))
    report = DataEfficiencyReport(iterations=iterations, rows=rows,
                                  backbone_unchanged=backbone_unchanged)
    if out_dir is not None:
        report.write(out_dir)
    return report
