"""Training loops: unconditional pretraining and conditional fine-tuning.

A hand-rolled Adam works on name->tensor dicts so freezing is just a name
filter. Gradient accumulation sums scaled microbatch gradients, and the
per-item draws of (t, eps) come from a dedicated stream in item order, so
any microbatch split of the same effective batch consumes identical
randomness. Fine-tuning swaps a sample's layout for the empty one with
probability ``cond_dropout_p``, which is what later enables guidance.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .dataset import Dataset, image_to_tensor
from .layout import Layout
from .numerics import SeededRng
from .schedule import NoiseSchedule, diffusion_loss
from .unet import DenoiserModel

__all__ = [
    "TrainConfig",
    "AdamState",
    "RunLog",
    "TrainingDiverged",
    "adam_step",
    "train",
]

TRAIN_MODES = ("pretrain_unconditional", "finetune_adapted", "finetune_concat_baseline")
_MODEL_MODE_FOR = {
    "pretrain_unconditional": "unconditional",
    "finetune_adapted": "adapted",
    "finetune_concat_baseline": "concat_baseline",
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; the defaults are the desk-scale settings."""

    mode: str
    epochs: int = 1
    lr: float = 3e-4
    batch_size: int = 16
    microbatch: int | None = None  # accumulation chunk; None = whole batch
    freeze_backbone: bool = False
    cond_dropout_p: float = 0.1
    seed: int = 0
    max_steps: int | None = None  # optional hard cap on optimizer steps
    keep_checkpoints: int = 2

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.freeze_backbone and self.mode == "pretrain_unconditional":
            raise ValueError("freeze_backbone only applies to fine-tune modes")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.microbatch is not None and self.microbatch < 1:
            raise ValueError("microbatch must be >= 1")


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    With lr=0 the moments still advance but no parameter is written, so the
    values stay bitwise identical.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if lr != 0.0:
                m_hat = m / bc1
                v_hat = v / bc2
                p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))


@dataclass
class RunLog:
    """Append-only training trace; write_csv emits the two log files."""

    steps: list = field(default_factory=list)  # (step, epoch, loss, lr, wall_ms)
    evals: list = field(default_factory=list)  # (epoch, miou, box_score, ffd)

    def log_step(self, step: int, epoch: int, loss: float, lr: float, wall_ms: float) -> None:
        self.steps.append((step, epoch, loss, lr, wall_ms))

    def log_eval(self, epoch: int, miou: float, box_score: float, ffd: float) -> None:
        self.evals.append((epoch, miou, box_score, ffd))

    def write_csv(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "epoch", "loss", "lr", "wall_ms"])
            writer.writerows(self.steps)
        with open(out / "eval_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "miou", "box_score", "ffd"])
            writer.writerows(self.evals)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the position."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


def _trainable_params(model: DenoiserModel, config: TrainConfig) -> dict[str, torch.Tensor]:
    params = {}
    for name, p in model.named_parameters():
        if config.freeze_backbone and name.startswith("backbone."):
            p.requires_grad_(False)
            continue
        p.requires_grad_(True)
        params[name] = p
    if not params:
        raise ValueError("nothing to train")
    return params


def _empty_like(layout: Layout) -> Layout:
    return Layout.empty(layout.num_classes, layout.canvas)


def train(model: DenoiserModel, dataset: Dataset, config: TrainConfig,
          sched: NoiseSchedule, eval_fn=None, out_dir=None) -> tuple[DenoiserModel, RunLog]:
    """Run the configured number of epochs of shuffled minibatch Adam.

    ``eval_fn(model, epoch) -> dict`` (keys miou, box_score, ffd) is called
    after every epoch when given; checkpoints are written per epoch under
    ``out_dir`` with only the newest ``keep_checkpoints`` retained.
    """
    if _MODEL_MODE_FOR[config.mode] != model.mode:
        raise ValueError(f"config mode {config.mode!r} needs a {_MODEL_MODE_FOR[config.mode]!r} model, "
                         f"got {model.mode!r}")
    conditioned = config.mode != "pretrain_unconditional"
    rng = SeededRng(config.seed)
    order_rng = rng.child("order")
    loss_rng = rng.child("loss")
    drop_rng = rng.child("drop")

    params = _trainable_params(model, config)
    state = AdamState()
    log = RunLog()
    images = [image_to_tensor(rec.image) for rec in dataset.records]
    layouts = [rec.layout for rec in dataset.records]
    micro = config.microbatch or config.batch_size
    ckpt_paths: list[Path] = []
    step = 0
    stop = False

    def predict(x_t, ts, lays):
        return model(x_t, ts, lays if conditioned else None)

    for epoch in range(1, config.epochs + 1):
        if stop:
            break
        perm = order_rng.permutation(len(images))
        for start in range(0, len(perm), config.batch_size):
            batch_ids = perm[start:start + config.batch_size]
            t0 = time.monotonic()
            batch_layouts = []
            if conditioned:
                for i in batch_ids:
                    dropped = float(drop_rng.uniform()) < config.cond_dropout_p
                    batch_layouts.append(_empty_like(layouts[i]) if dropped else layouts[i])
            for p in params.values():
                if p.grad is not None:
                    p.grad = None
            total = len(batch_ids)
            loss_sum = 0.0
            for ms in range(0, total, micro):
                ids = batch_ids[ms:ms + micro]
                x0 = torch.stack([images[i] for i in ids])
                lays = batch_layouts[ms:ms + micro] if conditioned else None
                loss = diffusion_loss(predict, x0, lays, sched, loss_rng)
                loss_sum += float(loss.detach()) * len(ids)
                (loss * (len(ids) / total)).backward()
            batch_loss = loss_sum / total
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, step, batch_loss)
            grads = {name: (p.grad if p.grad is not None else torch.zeros_like(p))
                     for name, p in params.items()}
            adam_step(params, grads, state, config.lr)
            step += 1
            log.log_step(step, epoch, batch_loss, config.lr,
                         (time.monotonic() - t0) * 1000.0)
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        if eval_fn is not None:
            metrics = eval_fn(model, epoch)
            log.log_eval(epoch, metrics.get("miou", float("nan")),
                         metrics.get("box_score", float("nan")),
                         metrics.get("ffd", float("nan")))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"epoch_{epoch:04d}.ckpt"
            save_checkpoint(model, path)
            ckpt_paths.append(path)
            while len(ckpt_paths) > config.keep_checkpoints:
                ckpt_paths.pop(0).unlink(missing_ok=True)
    if out_dir is not None:
        log.write_csv(out_dir)
    return model, log
