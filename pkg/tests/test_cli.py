"""End-to-end tests for the command-line interface.

Everything runs in-process through ``main(argv)`` so exit codes and stdio
can be asserted directly. A module-scoped fixture builds one tiny workflow
(dataset, pretrained backbone, frozen-backbone fine-tune) that the slower
tests share.
"""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from ldif.checkpoint import load_checkpoint, manifest_group_sums, read_manifest
from ldif.cli import build_parser, main
from ldif.dataset import image_to_tensor, load_dataset
from ldif.layout import Instance, Layout, save_layout
from ldif.netpbm import read_ppm, write_pgm

SUBCOMMANDS = (
    "gen-data", "pretrain", "finetune", "sample", "edit",
    "eval", "efficiency", "data-efficiency", "param-report",
)

TINY_NET = ["--channels", "8,16", "--attn", "8,4", "--res-blocks", "1"]
FAST_SCHED = ["--timesteps", "10"]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One tiny end-to-end workflow shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc_gen = main(["gen-data", "--n", "6", "--k", "3", "--canvas", "8",
                   "--seed", "3", "--out", str(data)])

    pre_dir = root / "pre"
    rc_pre = main(["pretrain", "--data", str(data), "--out", str(pre_dir),
                   "--epochs", "1", "--batch-size", "4", "--lr", "1e-3",
                   *TINY_NET, *FAST_SCHED])

    ft_cfg = root / "finetune.cfg"
    ft_cfg.write_text(
        "# frozen-backbone fine-tune, small adapter\n"
        "\n"
        "freeze-backbone = true\n"
        "epochs = 1\n"
        "batch-size = 4\n"
        "cond-dropout = 0.0\n"
        "timesteps = 10\n"
        "d-base = 8\n"
        "prompts = 4\n")
    ft_dir = root / "ft"
    rc_ft = main(["finetune", "--data", str(data),
                  "--ckpt", str(pre_dir / "model.ckpt"),
                  "--out", str(ft_dir), "--config", str(ft_cfg), "--seed", "1"])

    layout_path = root / "layout.json"
    save_layout(Layout(canvas=(8, 8), num_classes=3,
                       instances=(Instance(class_id=1, bbox=(0.0, 0.0, 0.5, 1.0)),)),
                layout_path)
    return {
        "root": root,
        "data": data,
        "pre": pre_dir / "model.ckpt",
        "pre_dir": pre_dir,
        "ft": ft_dir / "model.ckpt",
        "layout": layout_path,
        "codes": (rc_gen, rc_pre, rc_ft),
    }


class TestParsing:
    def test_help_exits_zero_for_every_subcommand(self, capsys):
        for cmd in SUBCOMMANDS:
            assert main([cmd, "--help"]) == 0, cmd
            assert cmd in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for cmd in SUBCOMMANDS:
            assert cmd in out

    def test_missing_command_is_usage_error(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "ldif", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "2", "--out", str(tmp_path / "d"), "--bogus", "1"])
        assert rc == 1
        capsys.readouterr()

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["gen-data", "--n", "2"]) == 1
        capsys.readouterr()

    def test_abbreviated_flags_rejected(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "2", "--canv", "8", "--out", str(tmp_path / "d")])
        assert rc == 1
        capsys.readouterr()

    def test_help_documents_every_flag(self):
        parser = build_parser()
        for action in parser._actions:
            if hasattr(action, "choices") and isinstance(action.choices, dict):
                for name, sub in action.choices.items():
                    text = sub.format_help()
                    for opt in sub._actions:
                        for flag in opt.option_strings:
                            assert flag in text, (name, flag)


class TestWorkflow:
    def test_workflow_commands_succeed(self, ws):
        assert ws["codes"] == (0, 0, 0)
        assert ws["pre"].exists()
        assert ws["ft"].exists()
        assert (ws["pre_dir"] / "train_log.csv").exists()

    def test_gen_data_manifest_count(self, ws):
        manifest = json.loads((ws["data"] / "manifest.json").read_text())
        assert manifest["count"] == 6
        assert len(load_dataset(ws["data"]).records) == 6

    def test_resolved_config_echoed(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "2", "--k", "3", "--canvas", "8",
                   "--out", str(tmp_path / "d")])
        assert rc == 0
        err = capsys.readouterr().err
        assert "gen-data" in err
        assert "n=2" in err
        assert "canvas=8" in err

    def test_freeze_via_config_keeps_backbone_bitwise(self, ws):
        pre = load_checkpoint(ws["pre"])
        ft = load_checkpoint(ws["ft"])
        assert ft.mode == "adapted"
        pre_state = pre.state_dict()
        for name, tensor in ft.state_dict().items():
            if name.startswith("backbone."):
                assert torch.equal(tensor, pre_state[name]), name

    def test_param_report_adapted(self, ws, tmp_path, capsys):
        out = tmp_path / "report.json"
        rc = main(["param-report", "--ckpt", str(ws["ft"]), "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "backbone parameters:" in text
        assert "adapter parameters:" in text
        assert "overhead" in text
        assert "manifest agrees: True" in text
        doc = json.loads(out.read_text())
        sums = manifest_group_sums(read_manifest(ws["ft"]))
        assert doc["backbone_params"] == sums["backbone"]
        assert doc["adapter_params"] == sums["adapter"]
        assert doc["manifest_agrees"] is True

    def test_param_report_unconditional(self, ws, capsys):
        rc = main(["param-report", "--ckpt", str(ws["pre"])])
        assert rc == 0
        text = capsys.readouterr().out
        assert "adapter parameters:  0" in text
        assert "overhead" not in text


class TestSampleCli:
    def _sample(self, ws, out, seed, extra=()):
        return main(["sample", "--ckpt", str(ws["pre"]), "--out", str(out),
                     "--sampler", "ddim", "--steps", "3", "--seed", str(seed),
                     *FAST_SCHED, *extra])

    def test_sample_deterministic_bytes(self, ws, tmp_path, capsys):
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        assert self._sample(ws, a, seed=11) == 0
        assert self._sample(ws, b, seed=11) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_sample_seed_changes_bytes(self, ws, tmp_path, capsys):
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        assert self._sample(ws, a, seed=11) == 0
        assert self._sample(ws, b, seed=12) == 0
        capsys.readouterr()
        assert a.read_bytes() != b.read_bytes()

    def test_sample_writes_directory_for_multiple(self, ws, tmp_path, capsys):
        out = tmp_path / "imgs"
        assert self._sample(ws, out, seed=5, extra=("--n", "2")) == 0
        capsys.readouterr()
        assert (out / "sample_0000.ppm").exists()
        assert (out / "sample_0001.ppm").exists()

    def test_conditional_sample_with_layout(self, ws, tmp_path, capsys):
        out = tmp_path / "cond.ppm"
        rc = main(["sample", "--ckpt", str(ws["ft"]), "--layout", str(ws["layout"]),
                   "--out", str(out), "--sampler", "ddim", "--steps", "3",
                   "--cfg", "2.0", "--seed", "7", *FAST_SCHED])
        assert rc == 0
        capsys.readouterr()
        assert read_ppm(out).shape == (8, 8, 3)

    def test_adapted_model_requires_layout(self, ws, tmp_path, capsys):
        rc = main(["sample", "--ckpt", str(ws["ft"]), "--out", str(tmp_path / "x.ppm"),
                   "--sampler", "ddim", "--steps", "3", *FAST_SCHED])
        assert rc == 2
        assert "--layout" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        rc = main(["sample", "--ckpt", str(tmp_path / "nope.ckpt"),
                   "--out", str(tmp_path / "x.ppm")])
        assert rc == 2
        assert "error" in capsys.readouterr().err


class TestEditCli:
    def _originals(self, ws, tmp_path):
        from ldif.netpbm import save_image
        record = load_dataset(ws["data"]).records[0]
        orig = tmp_path / "orig.ppm"
        save_image(orig, image_to_tensor(record.image))
        return orig

    def test_zero_mask_returns_original_bytes(self, ws, tmp_path, capsys):
        orig = self._originals(ws, tmp_path)
        mask = tmp_path / "mask.pgm"
        write_pgm(mask, np.zeros((8, 8), dtype=np.uint8))
        out = tmp_path / "out.ppm"
        rc = main(["edit", "--ckpt", str(ws["ft"]), "--image", str(orig),
                   "--mask", str(mask), "--layout", str(ws["layout"]),
                   "--out", str(out), "--sampler", "ddim", "--steps", "3",
                   *FAST_SCHED])
        assert rc == 0
        capsys.readouterr()
        assert out.read_bytes() == orig.read_bytes()

    def test_partial_mask_preserves_unmasked_half(self, ws, tmp_path, capsys):
        orig = self._originals(ws, tmp_path)
        mask_arr = np.zeros((8, 8), dtype=np.uint8)
        mask_arr[:, :4] = 255
        mask = tmp_path / "mask.pgm"
        write_pgm(mask, mask_arr)
        out = tmp_path / "out.ppm"
        rc = main(["edit", "--ckpt", str(ws["ft"]), "--image", str(orig),
                   "--mask", str(mask), "--layout", str(ws["layout"]),
                   "--out", str(out), "--sampler", "ddim", "--steps", "3",
                   "--seed", "13", *FAST_SCHED])
        assert rc == 0
        capsys.readouterr()
        got = read_ppm(out)
        want = read_ppm(orig)
        assert np.array_equal(got[:, 4:], want[:, 4:])
        assert not np.array_equal(got[:, :4], want[:, :4])


class TestEvalCli:
    def test_eval_prints_metrics_and_writes_json(self, ws, tmp_path, capsys):
        out = tmp_path / "metrics.json"
        rc = main(["eval", "--ckpt", str(ws["ft"]), "--data", str(ws["data"]),
                   "--n-eval", "2", "--sampler", "ddim", "--steps", "2",
                   "--out", str(out), *FAST_SCHED])
        assert rc == 0
        assert "miou=" in capsys.readouterr().out
        doc = json.loads(out.read_text())
        assert doc["n_samples"] == 2
        assert set(doc) >= {"miou", "box_precision", "box_recall", "ffd"}


class TestConfigFile:
    def _gen(self, tmp_path, cfg_text, extra=()):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(cfg_text)
        out = tmp_path / "out"
        rc = main(["gen-data", "--n", "2", "--out", str(out),
                   "--config", str(cfg), *extra])
        return rc, out

    def test_file_fills_defaults(self, tmp_path, capsys):
        rc, out = self._gen(tmp_path, "canvas=8\nk=3\n")
        assert rc == 0
        capsys.readouterr()
        ds = load_dataset(out)
        assert ds.canvas == (8, 8)
        assert ds.num_classes == 3

    def test_explicit_flag_beats_file(self, tmp_path, capsys):
        rc, out = self._gen(tmp_path, "canvas=16\nk=3\n", extra=("--canvas", "8"))
        assert rc == 0
        capsys.readouterr()
        ds = load_dataset(out)
        assert ds.canvas == (8, 8)
        assert ds.num_classes == 3

    def test_comments_and_blank_lines_ignored(self, tmp_path, capsys):
        rc, _ = self._gen(tmp_path, "# sizes\n\ncanvas = 8\nk = 3\n")
        assert rc == 0
        capsys.readouterr()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        rc, _ = self._gen(tmp_path, "bogus=1\n")
        assert rc == 1
        assert "unknown key" in capsys.readouterr().err

    def test_bad_value_rejected(self, tmp_path, capsys):
        rc, _ = self._gen(tmp_path, "canvas=tiny\n")
        assert rc == 1
        assert "bad value" in capsys.readouterr().err

    def test_line_without_equals_rejected(self, tmp_path, capsys):
        rc, _ = self._gen(tmp_path, "canvas\n")
        assert rc == 1
        assert "key=value" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "2", "--out", str(tmp_path / "d"),
                   "--config", str(tmp_path / "nope.cfg")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_nested_config_rejected(self, tmp_path, capsys):
        rc, _ = self._gen(tmp_path, "config=other.cfg\n")
        assert rc == 1
        assert "nest" in capsys.readouterr().err

    def test_boolean_value_validated(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("freeze-backbone=maybe\n")
        rc = main(["finetune", "--data", "unused", "--ckpt", "unused",
                   "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert rc == 1
        assert "true/false" in capsys.readouterr().err

    def test_choice_value_validated(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("sampler=warp\n")
        rc = main(["sample", "--ckpt", "unused", "--out", str(tmp_path / "x.ppm"),
                   "--config", str(cfg)])
        assert rc == 1
        assert "must be one of" in capsys.readouterr().err


class TestExperimentCli:
    def test_efficiency_smoke(self, ws, tmp_path, capsys):
        out = tmp_path / "eff"
        rc = main(["efficiency", "--ckpt", str(ws["pre"]), "--data", str(ws["data"]),
                   "--out", str(out), "--epochs", "1", "--batch-size", "4",
                   "--eval-n", "2", "--eval-steps", "2", *FAST_SCHED])
        assert rc == 0
        assert "threshold" in capsys.readouterr().out
        rows = (out / "efficiency.csv").read_text().splitlines()
        assert rows[0] == "variant,epoch,miou,ffd"
        assert len(rows) == 3
        assert {r.split(",")[0] for r in rows[1:]} == {"adapted", "concat_baseline"}
        assert (out / "efficiency_summary.txt").exists()

    def test_data_efficiency_smoke(self, ws, tmp_path, capsys):
        out = tmp_path / "deff"
        rc = main(["data-efficiency", "--ckpt", str(ws["pre"]), "--data", str(ws["data"]),
                   "--out", str(out), "--counts", "4", "--iterations", "2",
                   "--batch-size", "4", "--eval-n", "2", "--eval-steps", "2",
                   *FAST_SCHED])
        assert rc == 0
        text = capsys.readouterr().out
        assert "permuted" in text
        assert "backbone unchanged: True" in text
        rows = (out / "data_efficiency.csv").read_text().splitlines()
        assert rows[0] == "n_samples,iterations,miou,permuted_miou,ffd"
        assert rows[1].startswith("4,2,")
