import json
import struct
import subprocess
import sys

import numpy as np
import pytest
import yaml

from uvc.cli import RunConfig, ValidationError, load_config, main
from uvc.resources import dense_flops
from uvc.vit import ViTConfig

TINY = {
    "model": {"image_size": 8, "patch_size": 4, "embed_dim": 16, "num_blocks": 2, "num_heads": 2,
              "mlp_ratio": 2.0, "num_classes": 3},
    "data": {"num_classes": 3, "per_class": 10},
    "dense": {"epochs": 2, "batch_size": 8},
    "compress": {"epochs": 2, "batch_size": 8},
    "finetune": {"epochs": 1, "batch_size": 8},
    "budget": 0.7,
}


def write_config(tmp_path, **changes):
    cfg = {**TINY, **changes}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_print_defaults_round_trips(capsys):
    assert main(["print-defaults"]) == 0
    text = capsys.readouterr().out
    assert RunConfig.from_dict(yaml.safe_load(text)).to_dict() == RunConfig().to_dict()


def test_budget_forms_and_seed_propagation(tmp_path):
    cfg = load_config(write_config(tmp_path, seed=7))
    assert cfg.compress.seed == cfg.dense.seed == cfg.finetune.seed == 7
    dense = dense_flops(ViTConfig(**TINY["model"]))
    absolute = load_config(write_config(tmp_path, budget=0.7 * dense))
    assert absolute.budget_fraction() == pytest.approx(0.7)


@pytest.mark.parametrize("change", [
    {"budget": 0.001},
    {"budget": 0.0},
    {"budget": 1.5},
    {"bogus": 1},
    {"compress": {"lr_z": -1.0}},
    {"data": {"source": "folder", "path": "/does/not/exist", "num_classes": 3}},
    {"data": {"num_classes": 4}},
    {"model": {"embed_dim": 15, "num_heads": 2}},
])
def test_invalid_configs_exit_with_validation_code(tmp_path, change, capsys):
    path = write_config(tmp_path, **change)
    assert main(["train-dense", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o" / "dense.ckpt").exists()


def test_missing_inputs_exit_with_validation_code(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["compress", "--config", cfg, "--dense", str(tmp_path / "nope.ckpt")]) == 2
    assert main(["train-dense", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_report_on_dense_checkpoint_keeps_everything(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train-dense", "--config", cfg, "--out", str(out)]) == 0
    assert main(["report", "--config", cfg, "--out", str(out / "rep"), "--input", str(out / "dense.ckpt")]) == 0
    summary = yaml.safe_load((out / "rep" / "summary.yaml").read_text())
    assert summary["plan_flops"] == summary["dense_flops"]
    assert summary["skip_mask"] == [False, False]
    assert all(b["kept_heads"] == 2 and b["kept_hidden"] == 32 for b in summary["blocks"])


def test_version_mismatch_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train-dense", "--config", cfg, "--out", str(out)]) == 0
    raw = bytearray((out / "dense.ckpt").read_bytes())
    magic_len = raw.index(b"UVCKPT") + len(b"UVCKPT")
    raw[magic_len:magic_len + 4] = struct.pack("<I", 99)
    (out / "future.ckpt").write_bytes(bytes(raw))
    assert main(["eval", "--config", cfg, "--model", str(out / "future.ckpt")]) == 2
    assert "version" in capsys.readouterr().err


def run_tiny_pipeline(tmp_path, name, capsys):
    out = tmp_path / name
    assert main(["pipeline", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def test_pipeline_outputs_are_complete_and_byte_identical(tmp_path, capsys):
    a = run_tiny_pipeline(tmp_path, "a", capsys)
    b = run_tiny_pipeline(tmp_path, "b", capsys)
    names = sorted(p.name for p in a.iterdir() if p.is_file())
    for expected in ("dense.ckpt", "state.ckpt", "plan.json", "compressed.ckpt", "final.ckpt", "trace.jsonl",
                     "flops.csv", "flops_soft.csv", "kept_heads.csv", "kept_dims.csv", "skip_mask.csv",
                     "summary.yaml", "pipeline.json"):
        assert expected in names
    for name in names:
        if name != "summary.yaml":  # holds the source path, which differs between the two runs
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
    plan = json.loads((a / "plan.json").read_text())
    assert plan["flops"] <= plan["dense_flops"]
    trace = [json.loads(line) for line in (a / "trace.jsonl").read_text().splitlines()]
    assert trace and all(np.isfinite(r["loss"]) for r in trace)


def test_eval_reproduces_recorded_accuracy(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train-dense", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--model", str(out / "dense.ckpt")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["matches_recorded"] is True


def test_eval_with_mismatched_model_config_is_rejected(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train-dense", "--config", cfg, "--out", str(out)]) == 0
    other = write_config(tmp_path, model={**TINY["model"], "num_blocks": 3})
    assert main(["eval", "--config", other, "--model", str(out / "dense.ckpt")]) == 2


def test_load_config_rejects_non_mapping(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError):
        load_config(str(p))


def test_module_entry_point_runs():
    done = subprocess.run([sys.executable, "-m", "uvc", "print-defaults"], capture_output=True, text=True)
    assert done.returncode == 0 and "compress:" in done.stdout
