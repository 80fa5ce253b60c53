"""Command-line interface.

One executable, nine subcommands covering the full workflow: data
generation, unconditional pretraining, conditional fine-tuning, sampling,
mask editing, metric evaluation, the two adaptation studies, and a
parameter-count report. Every flag can instead come from a ``key=value``
config file; explicit flags win over the file, which wins over defaults.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, manifest_group_sums, read_manifest, save_checkpoint
from .dataset import generate_dataset, load_dataset, save_dataset
from .evalmetrics import evaluate
from .experiments import (EvalSettings, data_efficiency_experiment,
                          efficiency_experiment, generate_eval_images)
from .layout import load_layout
from .netpbm import load_image, read_pgm, save_image
from .numerics import SeededRng
from .sampler import CFG_MODES, SAMPLER_KINDS, SamplerConfig, edit_sample, sample_batch
from .schedule import linear_schedule
from .training import TrainConfig, train
from .unet import (AdapterConfig, DenoiserModel, UNetConfig, insert_adapters,
                   param_report, to_concat_baseline)

__all__ = ["main", "build_parser"]


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--config", type=str, default=None,
                   help="key=value file; explicit flags take precedence")
    p.add_argument("--threads", type=int, default=None,
                   help="torch CPU thread count (does not change results)")


def _add_schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--timesteps", type=int, default=200, help="diffusion chain length T")
    p.add_argument("--beta-start", type=float, default=1e-4, help="first-step noise variance")
    p.add_argument("--beta-end", type=float, default=0.02, help="last-step noise variance")


def _add_sampler(p: argparse.ArgumentParser, steps: int, cfg: float) -> None:
    p.add_argument("--sampler", choices=SAMPLER_KINDS, default="plms", help="sampling algorithm")
    p.add_argument("--steps", type=int, default=steps, help="sampler step count")
    p.add_argument("--cfg", type=float, default=cfg, help="guidance scale")
    p.add_argument("--cfg-mode", choices=CFG_MODES, default="standard",
                   help="guidance combination rule")
    p.add_argument("--eta", type=float, default=0.0, help="stochasticity for ddim steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldif", allow_abbrev=False,
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--k", type=int, default=6, help="number of classes")
    p.add_argument("--canvas", type=int, default=32, help="square image size")
    p.add_argument("--out", type=str, required=True, help="output dataset directory")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", allow_abbrev=False,
                       help="pretrain the unconditional backbone")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--out", type=str, required=True, help="run directory (checkpoints, logs)")
    p.add_argument("--epochs", type=int, default=20, help="number of training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="samples per optimizer step")
    p.add_argument("--microbatch", type=int, default=None, help="accumulation chunk size")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--channels", type=_csv_ints, default=(32, 64, 64),
                   help="comma-separated level widths")
    p.add_argument("--attn", type=_csv_ints, default=(16, 8),
                   help="comma-separated attention resolutions")
    p.add_argument("--res-blocks", type=int, default=2, help="residual blocks per level")
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", allow_abbrev=False,
                       help="fine-tune a pretrained backbone on layouts")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--ckpt", type=str, required=True, help="pretrained backbone checkpoint")
    p.add_argument("--mode", choices=("adapted", "concat_baseline"), default="adapted",
                   help="conditioning mechanism")
    p.add_argument("--out", type=str, required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=30, help="number of training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="samples per optimizer step")
    p.add_argument("--microbatch", type=int, default=None, help="accumulation chunk size")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--freeze-backbone", action="store_true",
                   help="train only the adapter parameters")
    p.add_argument("--cond-dropout", type=float, default=0.1,
                   help="probability of training on the empty layout")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--d-base", type=int, default=16, help="shared class-embedding width")
    p.add_argument("--prompts", type=int, default=8, help="task prompt tokens per site")
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sample", allow_abbrev=False, help="generate images from a checkpoint")
    p.add_argument("--ckpt", type=str, required=True, help="model checkpoint")
    p.add_argument("--layout", type=str, default=None,
                   help="layout JSON (omit for an unconditional model)")
    p.add_argument("--n", type=int, default=1, help="images to generate")
    p.add_argument("--out", type=str, required=True,
                   help="output PPM file (or directory when --n > 1)")
    _add_sampler(p, steps=100, cfg=5.0)
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("edit", allow_abbrev=False,
                       help="regenerate a masked region of an image")
    p.add_argument("--ckpt", type=str, required=True, help="model checkpoint")
    p.add_argument("--image", type=str, required=True, help="original PPM image")
    p.add_argument("--mask", type=str, required=True,
                   help="PGM mask; pixels >= 128 are regenerated")
    p.add_argument("--layout", type=str, required=True, help="layout JSON for the edit")
    p.add_argument("--out", type=str, required=True, help="output PPM file")
    _add_sampler(p, steps=100, cfg=5.0)
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", allow_abbrev=False,
                       help="sample against dataset layouts and score the results")
    p.add_argument("--ckpt", type=str, required=True, help="model checkpoint")
    p.add_argument("--data", type=str, required=True, help="reference dataset directory")
    p.add_argument("--n-eval", type=int, default=64, help="layouts to evaluate")
    p.add_argument("--out", type=str, default=None, help="optional metrics JSON path")
    _add_sampler(p, steps=50, cfg=3.0)
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("efficiency", allow_abbrev=False,
                       help="compare adapter vs input-concat fine-tuning speed")
    p.add_argument("--ckpt", type=str, required=True, help="pretrained backbone checkpoint")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--out", type=str, required=True, help="report directory")
    p.add_argument("--epochs", type=int, default=30, help="fine-tuning budget per variant")
    p.add_argument("--threshold", type=float, default=0.5, help="target layout mIoU")
    p.add_argument("--batch-size", type=int, default=16, help="samples per optimizer step")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--eval-n", type=int, default=16, help="layouts scored per epoch")
    p.add_argument("--eval-steps", type=int, default=20, help="sampler steps for scoring")
    p.add_argument("--eval-cfg", type=float, default=3.0, help="guidance scale for scoring")
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_efficiency)

    p = sub.add_parser("data-efficiency", allow_abbrev=False,
                       help="frozen-backbone adapter training on small subsets")
    p.add_argument("--ckpt", type=str, required=True, help="pretrained backbone checkpoint")
    p.add_argument("--data", type=str, required=True, help="dataset directory")
    p.add_argument("--out", type=str, required=True, help="report directory")
    p.add_argument("--counts", type=_csv_ints, default=(128, 256, 512),
                   help="comma-separated subset sizes")
    p.add_argument("--iterations", type=int, default=2000, help="optimizer steps per subset")
    p.add_argument("--batch-size", type=int, default=16, help="samples per optimizer step")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--eval-n", type=int, default=16, help="layouts scored per subset")
    p.add_argument("--eval-steps", type=int, default=20, help="sampler steps for scoring")
    p.add_argument("--eval-cfg", type=float, default=3.0, help="guidance scale for scoring")
    _add_schedule(p)
    _add_common(p)
    p.set_defaults(func=_cmd_data_efficiency)

    p = sub.add_parser("param-report", allow_abbrev=False,
                       help="parameter counts per group, cross-checked against the checkpoint")
    p.add_argument("--ckpt", type=str, required=True, help="model checkpoint")
    p.add_argument("--out", type=str, default=None, help="optional report JSON path")
    _add_common(p)
    p.set_defaults(func=_cmd_param_report)

    return parser


def _subparser_for(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise RuntimeError("no subparsers registered")


class UsageError(ValueError):
    pass


def _apply_config_file(args: argparse.Namespace, argv: list[str],
                       sub: argparse.ArgumentParser) -> None:
    """Fill still-default values from the key=value file named by --config."""
    if args.config is None:
        return
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    actions = {}
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            actions[action.dest] = action
    explicit = set()
    for dest, action in actions.items():
        for opt in action.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                explicit.add(dest)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        value = value.strip()
        if dest in ("config",):
            raise UsageError(f"{path}:{lineno}: config files cannot nest")
        if dest not in actions:
            raise UsageError(f"{path}:{lineno}: unknown key {key.strip()!r} for this subcommand")
        if dest in explicit:
            continue
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() not in ("true", "false", "1", "0"):
                raise UsageError(f"{path}:{lineno}: boolean key {key.strip()!r} needs true/false")
            parsed = value.lower() in ("true", "1")
        else:
            convert = action.type or str
            try:
                parsed = convert(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key.strip()!r}: {exc}") from exc
            if action.choices is not None and parsed not in action.choices:
                raise UsageError(f"{path}:{lineno}: {key.strip()!r} must be one of {list(action.choices)}")
        setattr(args, dest, parsed)


def _print_resolved(args: argparse.Namespace) -> None:
    shown = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    print(f"[ldif] {args.command} config: "
          + " ".join(f"{k}={v}" for k, v in shown.items() if k != "command"),
          file=sys.stderr)


def _sched(args):
    return linear_schedule(args.timesteps, args.beta_start, args.beta_end)


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(kind=args.sampler, steps=args.steps, cfg_scale=args.cfg,
                         cfg_mode=args.cfg_mode, eta=args.eta)


def _eval_settings(dataset, args) -> EvalSettings:
    n = min(args.eval_n, len(dataset.records))
    recs = dataset.records[:n]
    return EvalSettings(
        layouts=tuple(r.layout for r in recs),
        reference_images=tuple(r.image for r in recs),
        sampler=SamplerConfig(kind="ddim", steps=args.eval_steps, cfg_scale=args.eval_cfg),
        seed=args.seed + 1,
    )


def _cmd_gen_data(args) -> int:
    dataset = generate_dataset(args.n, num_classes=args.k, canvas=args.canvas, seed=args.seed)
    save_dataset(dataset, args.out)
    print(f"[ldif] wrote {len(dataset.records)} samples to {args.out}", file=sys.stderr)
    return 0


def _cmd_pretrain(args) -> int:
    dataset = load_dataset(args.data)
    h, w = dataset.canvas
    if h != w:
        raise ValueError("training expects a square canvas")
    torch.manual_seed(args.seed)
    model = DenoiserModel(UNetConfig(image_size=h, channels=args.channels,
                                     attention_resolutions=args.attn,
                                     num_res_blocks=args.res_blocks))
    config = TrainConfig(mode="pretrain_unconditional", epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, microbatch=args.microbatch,
                         seed=args.seed)
    _, log = train(model, dataset, config, _sched(args), out_dir=args.out)
    final = Path(args.out) / "model.ckpt"
    save_checkpoint(model, final)
    losses = [row[2] for row in log.steps]
    print(f"[ldif] pretrained {args.epochs} epochs, final loss "
          f"{losses[-1]:.4f}, checkpoint {final}", file=sys.stderr)
    return 0


def _cmd_finetune(args) -> int:
    dataset = load_dataset(args.data)
    backbone = load_checkpoint(args.ckpt)
    torch.manual_seed(args.seed)
    if args.mode == "adapted":
        adapter_config = AdapterConfig(num_classes=dataset.num_classes,
                                       d_base=args.d_base, prompt_count=args.prompts)
        model = insert_adapters(backbone, dataset.num_classes, adapter_config)
        train_mode = "finetune_adapted"
    else:
        model = to_concat_baseline(backbone, dataset.num_classes)
        train_mode = "finetune_concat_baseline"
    config = TrainConfig(mode=train_mode, epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, microbatch=args.microbatch,
                         freeze_backbone=args.freeze_backbone,
                         cond_dropout_p=args.cond_dropout, seed=args.seed,
                         max_steps=args.max_steps)
    _, log = train(model, dataset, config, _sched(args), out_dir=args.out)
    final = Path(args.out) / "model.ckpt"
    save_checkpoint(model, final)
    losses = [row[2] for row in log.steps]
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"[ldif] fine-tuned ({args.mode}){tail}, checkpoint {final}", file=sys.stderr)
    return 0


def _cmd_sample(args) -> int:
    model = load_checkpoint(args.ckpt)
    layouts = None
    if args.layout is not None:
        layout = load_layout(args.layout, num_classes=model.num_classes)
        layouts = [layout] * args.n
    elif model.mode != "unconditional":
        raise ValueError(f"a {model.mode} model needs --layout (an empty layout is allowed)")
    rng = SeededRng(args.seed).child("cli-sample")
    images = sample_batch(model, layouts, _sampler_config(args), _sched(args), rng, n=args.n)
    out = Path(args.out)
    if args.n == 1:
        save_image(out, images[0])
        print(f"[ldif] wrote {out}", file=sys.stderr)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.n):
            save_image(out / f"sample_{i:04d}.ppm", images[i])
        print(f"[ldif] wrote {args.n} images to {out}", file=sys.stderr)
    return 0


def _cmd_edit(args) -> int:
    model = load_checkpoint(args.ckpt)
    original = load_image(args.image)
    mask = (read_pgm(args.mask) >= 128).astype(np.uint8)
    layout = load_layout(args.layout, num_classes=model.num_classes)
    rng = SeededRng(args.seed).child("cli-edit")
    out_img = edit_sample(model, original, layout, mask, _sampler_config(args),
                          _sched(args), rng)
    save_image(args.out, out_img)
    print(f"[ldif] wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    n = min(args.n_eval, len(dataset.records))
    recs = dataset.records[:n]
    layouts = [r.layout for r in recs]
    rng = SeededRng(args.seed).child("cli-eval")
    images = []
    chunk = 16
    config = _sampler_config(args)
    sched = _sched(args)
    for start in range(0, n, chunk):
        part = layouts[start:start + chunk]
        batch = sample_batch(model, part, config, sched, rng.child(f"chunk-{start}"))
        images.extend(batch.unbind(0))
    report = evaluate(images, layouts, [r.image for r in recs])
    print(str(report))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=1) + "\n")
    return 0


def _cmd_efficiency(args) -> int:
    dataset = load_dataset(args.data)
    settings = _eval_settings(dataset, args)
    report = efficiency_experiment(args.ckpt, dataset, _sched(args), settings,
                                   epochs=args.epochs, threshold=args.threshold,
                                   batch_size=args.batch_size, lr=args.lr,
                                   seed=args.seed, out_dir=args.out)
    print(report.summary())
    return 0


def _cmd_data_efficiency(args) -> int:
    dataset = load_dataset(args.data)
    settings = _eval_settings(dataset, args)
    report = data_efficiency_experiment(args.ckpt, dataset, _sched(args), settings,
                                        sample_counts=args.counts,
                                        iterations=args.iterations,
                                        batch_size=args.batch_size, lr=args.lr,
                                        seed=args.seed, out_dir=args.out)
    print(report.summary())
    return 0


def _cmd_param_report(args) -> int:
    model = load_checkpoint(args.ckpt)
    report = param_report(model)
    sums = manifest_group_sums(read_manifest(args.ckpt))
    match = (sums.get("backbone", 0) == report.backbone_params
             and sums.get("adapter", 0) == report.adapter_params)
    lines = [f"backbone parameters: {report.backbone_params}",
             f"adapter parameters:  {report.adapter_params}"]
    if report.adapter_params:
        lines.append(f"adapter overhead:    {report.overhead_percent:.2f}%")
    lines.append(f"checkpoint manifest agrees: {match}")
    print("\n".join(lines))
    if args.out:
        doc = {"backbone_params": report.backbone_params,
               "adapter_params": report.adapter_params,
               "per_group": report.per_group,
               "manifest_sums": sums,
               "manifest_agrees": match}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    if not match:
        raise RuntimeError("parameter report does not match the checkpoint manifest")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        _apply_config_file(args, argv, _subparser_for(parser, args.command))
        if getattr(args, "threads", None):
            torch.set_num_threads(args.threads)
        _print_resolved(args)
        return args.func(args)
    except UsageError as exc:
        print(f"[ldif] usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps all failures to exit 2
        print(f"[ldif] error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
