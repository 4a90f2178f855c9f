"""A tiny end-to-end CLI configuration shared by the CLI and acceptance tests."""

import json
from pathlib import Path

from citilab.cli import main

TINY = {
    "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64, "max_seq_len": 64,
    "pretrain_per_task": 200, "pretrain_epochs": 1,
    "tool_train": 80, "general_train": 20, "test_per_task": 10,
    "importance_samples": 32, "probe_samples": 16,
    "epochs_rp": 1, "epochs_mi": 1, "epochs_uco": 1, "baseline_epochs": 1,
    "select_epochs_ft": 1, "select_epochs_lora": 1,
}

STEPS = [
    ["pretrain"],
    ["importance"],
    ["finetune", "--method", "ft"],
    ["finetune", "--method", "lora"],
    ["finetune", "--method", "citi"],
    ["finetune", "--method", "citi", "--no-rp"],
    ["icc"],
    ["replace-eval"],
    ["select-train"],
    ["router-trace"],
    ["eval"],
    ["report"],
]


def write_config(path: Path, **overrides) -> Path:
    path.write_text(json.dumps({**TINY, **overrides}))
    return path


def run_pipeline(out: Path, config: Path) -> Path:
    """Run every step; returns the run directory."""
    for step in STEPS:
        code = main(step + ["--config", str(config), "--out", str(out)])
        if code != 0:
            raise RuntimeError(f"step {step} exited with {code}")
    (run,) = [p for p in out.iterdir() if p.is_dir()]
    return run
