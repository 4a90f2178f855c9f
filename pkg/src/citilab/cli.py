"""Command-line pipelines. Every command reads and writes files under
``<out>/<config-hash>/`` and records what it produced in ``manifest.json``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import harness as hz
from .errors import ContractError, NumericFault
from .importance import ImportanceTable, export_scores
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tasks import GENERAL_TASKS, VOCAB, TaskKind, build_suite
from .trainer import CitiVariant, TrainConfig, baseline_train, pretrain, train_citi, train_selected, write_trace

log = logging.getLogger("citilab")

FORMAT_VERSION = 1
COMMANDS = ("pretrain", "finetune", "importance", "icc", "replace-eval", "select-train", "eval", "router-trace", "report")
_TRAIN_FIELDS = [f.name for f in fields(TrainConfig) if f.name != "seed"]


@dataclass
class RunConfig:
    format_version: int = FORMAT_VERSION
    seed: int = 0
    # model
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 128
    # pretraining
    pretrain_per_task: int = 20000
    pretrain_lr: float = 2e-3
    pretrain_epochs: int = 3
    pretrain_batch_size: int = 64
    # fine-tuning data and evaluation
    tool_train: int = 4000
    general_train: int = 1000
    test_per_task: int = 200
    importance_samples: int = 1000
    probe_samples: int = 256
    alt_task: str = "REVERSE"
    fractions: tuple = (0.0, 0.2, 0.5, 1.0)
    modes: tuple = ("top", "bottom")
    selective_fraction: float = 0.2
    selective_modes: tuple = ("top", "bottom", "random")
    rows: tuple = hz.TABLE_ROWS
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise ContractError(f"format_version: expected {FORMAT_VERSION}, got {self.format_version}")
        for name in ("pretrain_per_task", "pretrain_epochs", "pretrain_batch_size", "tool_train", "general_train", "test_per_task", "importance_samples", "probe_samples"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name}: must be >= 1")
        if self.pretrain_lr <= 0:
            raise ContractError("pretrain_lr: must be positive")
        if self.alt_task not in [k.value for k in GENERAL_TASKS]:
            raise ContractError(f"alt_task: must be a general task, got {self.alt_task!r}")
        if not 0 < self.selective_fraction <= 1:
            raise ContractError(f"selective_fraction: {self.selective_fraction} outside (0, 1]")
        if any(not 0 <= f <= 1 for f in self.fractions):
            raise ContractError("fractions: every entry must lie in [0, 1]")
        bad_rows = sorted(set(self.rows) - set(hz.TABLE_ROWS))
        if bad_rows:
            raise ContractError(f"rows: unknown row {bad_rows[0]!r}")
        try:
            self.train.validate()
        except ContractError as exc:
            # TrainConfig names its fields as "TrainConfig.<name>"; report the flat key
            raise ContractError(str(exc).replace("TrainConfig.", "")) from None
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_layers, self.d_model, self.n_heads, self.d_ff, len(VOCAB), self.max_seq_len, self.seed)

    def experiment_params(self) -> hz.ExperimentParams:
        return hz.ExperimentParams(
            seed=self.seed,
            tool_train=self.tool_train,
            general_train=self.general_train,
            test_per_task=self.test_per_task,
            importance_samples=self.importance_samples,
            probe_samples=self.probe_samples,
            alt_task=self.alt_task,
            fractions=tuple(self.fractions),
            modes=tuple(self.modes),
            selective_fraction=self.selective_fraction,
            selective_modes=tuple(self.selective_modes),
            rows=tuple(self.rows),
            train=self.train,
        )

    def canonical(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        for k in ("fractions", "modes", "selective_modes", "rows"):
            flat[k] = list(flat[k])
        flat.update({k: getattr(self.train, k) for k in _TRAIN_FIELDS})
        return flat

    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def config_from_mapping(data: dict) -> RunConfig:
    """Flat JSON object -> validated RunConfig; unknown keys are rejected by name."""
    if not isinstance(data, dict):
        raise ContractError("config: top level must be a JSON object")
    run_keys = {f.name for f in fields(RunConfig)} - {"train"}
    train_keys = set(_TRAIN_FIELDS)
    for key in sorted(data):
        if key not in run_keys and key not in train_keys:
            raise ContractError(f"config: unknown key {key!r}")
    run_kw = {k: v for k, v in data.items() if k in run_keys}
    for k in ("fractions", "modes", "selective_modes", "rows"):
        if k in run_kw:
            run_kw[k] = tuple(run_kw[k])
    train_kw = {k: v for k, v in data.items() if k in train_keys}
    cfg = RunConfig(**run_kw)
    cfg.train = TrainConfig(**train_kw, seed=cfg.seed)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ContractError(f"config: no such file {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ContractError(f"config: malformed JSON in {p}: {exc}") from None
    if seed is not None:
        data = {**data, "seed": seed}
    return config_from_mapping(data)


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, base: str | Path, config: RunConfig):
        self.config = config
        self.root = Path(base) / config.hash()
        self.root.mkdir(parents=True, exist_ok=True)

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def reports(self) -> Path:
        p = self.root / "reports"
        p.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, name: str, hint: str) -> Path:
        p = self.ckpt(name)
        if not (p / "manifest.json").is_file():
            raise ContractError(f"missing checkpoint {p} (run `{hint}` first)")
        return p

    def save(self, model, name: str) -> Path:
        return save_checkpoint(model, self.ckpt(name))

    def record(self, command: str, artifacts: Sequence[Path], inputs: Sequence[Path] = ()) -> None:
        path = self.root / "manifest.json"
        manifest = json.loads(path.read_text()) if path.is_file() else {}
        manifest.update(format_version=FORMAT_VERSION, config_hash=self.config.hash(), config=self.config.canonical())
        runs = manifest.setdefault("runs", {})
        rel = lambda p: str(Path(p).relative_to(self.root))
        runs[command] = {"seed": self.config.seed, "inputs": sorted(rel(p) for p in inputs), "artifacts": sorted(rel(p) for p in artifacts)}
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _finetune_name(method: str, no_molora: bool, no_router_loss: bool, no_rp: bool) -> str:
    if method != "citi":
        return method
    parts = ["citi"] + [tag for flag, tag in ((no_molora, "no-molora"), (no_router_loss, "no-router-loss"), (no_rp, "no-rp")) if flag]
    return "-".join(parts)


# checkpoint directory -> comparison-table row
CHECKPOINT_ROWS = {
    "pretrained": "vanilla",
    "ft": "FT",
    "lora": "LoRA",
    "citi": "CITI",
    "citi-rp-mi": "RP+MI",
    "citi-no-router-loss": "w/o L_r",
    "citi-no-rp": "w/o RP",
    "citi-no-molora": "w/o MOLoRA",
}


def _load_scores(run: RunDir):
    path = run.reports() / "importance.json"
    if not path.is_file():
        raise ContractError(f"missing importance scores {path} (run `importance` first)")
    data = json.loads(path.read_text())
    tables = {label: ImportanceTable.from_json(t) for label, t in data.items()}
    return hz.selection_scores(tables), path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(run: RunDir, args) -> None:
    cfg = run.config
    suite = build_suite(cfg.seed, pretrain_per_task=cfg.pretrain_per_task, tool_train=1, general_train=1, test_per_task=1)
    data = [ex for k in GENERAL_TASKS for ex in suite.pretrain[k]]
    model = build_model(cfg.model_config())
    _, trace = pretrain(model, data, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.pretrain_batch_size, cfg.seed)
    ck = run.save(model, "pretrained")
    tr = write_trace(trace, run.reports() / "trace_pretrain.csv")
    params = cfg.experiment_params()
    tests = params.suite().test
    acc = hz.evaluate_general(model, {k: tests[k] for k in GENERAL_TASKS}, hz.greedy_decoder(args.workers))
    rep = hz._write_json(run.reports() / "pretrained_accuracy.json", acc)
    run.record("pretrain", [ck, tr, rep])


def cmd_importance(run: RunDir, args) -> None:
    ck = run.require("pretrained", "pretrain")
    model = load_checkpoint(ck)
    params = run.config.experiment_params()
    tables = hz.importance_tables(model, params.suite(), params)
    for t in tables.values():
        t.checkpoint = "checkpoints/pretrained"
    out = run.reports()
    m, c = hz.selection_scores(tables)
    written = [hz._write_json(out / "importance.json", {k: t.to_json() for k, t in tables.items()})]
    export_scores(tables[TaskKind.TOOLCALL.value], m, out / "importance_tool.csv", out / "importance_tool.json")
    general = {k.value: tables[k.value] for k in GENERAL_TASKS}
    agg_table = ImportanceTable("GENERAL", {cid: sum(t.scores[cid] for t in general.values()) for cid in c.scores}, sum(t.n_samples for t in general.values()))
    export_scores(agg_table, c, out / "importance_general.csv", out / "importance_general.json")
    written += [out / "importance_tool.csv", out / "importance_tool.json", out / "importance_general.csv", out / "importance_general.json"]
    run.record("importance", written, [ck])


def cmd_finetune(run: RunDir, args) -> None:
    cfg = run.config
    ck = run.require("pretrained", "pretrain")
    vanilla = load_checkpoint(ck)
    params = cfg.experiment_params()
    suite = params.suite()
    name = _finetune_name(args.method, args.no_molora, args.no_router_loss, args.no_rp)
    written, inputs = [], [ck]
    if args.method in ("ft", "lora"):
        if args.no_molora or args.no_router_loss or args.no_rp:
            raise ContractError("ablation flags apply only to --method citi")
        model = baseline_train(vanilla, args.method, suite.finetune[TaskKind.TOOLCALL], cfg.train)
        written.append(run.save(model, name))
    else:
        (m_scores, c_scores), scores_path = _load_scores(run)
        inputs.append(scores_path)
        variant = CitiVariant(molora=not args.no_molora, router_loss=not args.no_router_loss, rp=not args.no_rp)
        res = train_citi(vanilla, m_scores, c_scores, hz.mixed_training_data(suite, cfg.seed), cfg.train, variant)
        written.append(run.save(res.model, name))
        if name == "citi":
            written.append(run.save(res.checkpoints["MI"], "citi-rp-mi"))
        written.append(write_trace(res.trace, run.reports() / f"trace_{name}.csv"))
        written.append(hz._write_json(run.reports() / f"plan_{name}.json", {"adapters": [str(c) for c in res.adapter_ids], "uco": [str(c) for c in res.uco_ids]}))
    run.record(f"finetune:{name}", written, inputs)


def cmd_icc(run: RunDir, args) -> None:
    cfg = run.config
    ck = run.require("pretrained", "pretrain")
    vanilla = load_checkpoint(ck)
    params = cfg.experiment_params()
    suite = params.suite()
    written = []
    if not (run.ckpt("ft") / "manifest.json").is_file():
        written.append(run.save(baseline_train(vanilla, "ft", suite.finetune[TaskKind.TOOLCALL], cfg.train), "ft"))
    alt_name = f"alt-ft-{cfg.alt_task.lower()}"
    if not (run.ckpt(alt_name) / "manifest.json").is_file():
        written.append(run.save(baseline_train(vanilla, "ft", hz.alt_training_data(params), cfg.train), alt_name))
    spec = hz.ExperimentSpec("icc", {"vanilla": str(ck), "tool_sft": str(run.ckpt("ft")), "alt_sft": str(run.ckpt(alt_name))}, params, {"config_hash": cfg.hash()})
    written += hz.run_experiment(spec, run.reports(), args.workers)
    run.record("icc", written, [ck, run.ckpt("ft"), run.ckpt(alt_name)])


def cmd_replace_eval(run: RunDir, args) -> None:
    cfg = run.config
    ck = run.require("pretrained", "pretrain")
    params = cfg.experiment_params()
    written = []
    name = "ft-components"
    if not (run.ckpt(name) / "manifest.json").is_file():
        vanilla = load_checkpoint(ck)
        # only registry components move, so a full swap reproduces this model exactly
        comp_cfg = dataclasses.replace(cfg.train, select_epochs_ft=cfg.train.baseline_epochs)
        model = train_selected(vanilla, vanilla.registry.ids(), "ft", params.suite().finetune[TaskKind.TOOLCALL], comp_cfg)
        written.append(run.save(model, name))
    spec = hz.ExperimentSpec("replacement", {"vanilla": str(ck), "finetuned": str(run.ckpt(name))}, params, {"config_hash": cfg.hash()})
    written += hz.run_experiment(spec, run.reports(), args.workers)
    spec = hz.ExperimentSpec("jaccard", {"vanilla": str(ck)}, params, {"config_hash": cfg.hash()})
    written += hz.run_experiment(spec, run.reports(), args.workers)
    run.record("replace-eval", written, [ck, run.ckpt(name)])


def cmd_select_train(run: RunDir, args) -> None:
    ck = run.require("pretrained", "pretrain")
    spec = hz.ExperimentSpec("selective", {"vanilla": str(ck)}, run.config.experiment_params(), {"config_hash": run.config.hash()})
    run.record("select-train", hz.run_experiment(spec, run.reports(), args.workers), [ck])


def cmd_eval(run: RunDir, args) -> None:
    """Evaluate every known checkpoint present in the run directory."""
    ck = run.require("pretrained", "pretrain")
    params = run.config.experiment_params()
    tests = params.suite().test
    decoder = hz.greedy_decoder(args.workers)
    vanilla = load_checkpoint(ck)
    ref = hz.evaluate_general(vanilla, {k: tests[k] for k in GENERAL_TASKS}, decoder)
    rows, payload, inputs = [], {}, []
    for dirname, row in CHECKPOINT_ROWS.items():
        path = run.ckpt(dirname)
        if not (path / "manifest.json").is_file():
            continue
        model = vanilla if dirname == "pretrained" else load_checkpoint(path)
        rep = hz.evaluate_model(model, tests, ref, {"config_hash": run.config.hash(), "seed": run.config.seed}, decoder)
        rows.append(hz.report_row(row, rep))
        payload[row] = rep.to_json()
        inputs.append(path)
    out = run.reports()
    written = [
        hz._write_csv(out / "eval_table.csv", hz.REPORT_COLUMNS, rows),
        hz._write_json(out / "eval_table.json", payload),
    ]
    run.record("eval", written, inputs)


def cmd_router_trace(run: RunDir, args) -> None:
    ck = run.require("citi", "finetune --method citi")
    model = load_checkpoint(ck)
    tests = run.config.experiment_params().suite().test
    mixed = list(tests[TaskKind.TOOLCALL]) + [ex for k in GENERAL_TASKS for ex in tests[k]]
    out = run.reports()
    rows = hz.export_router_traces(model, mixed, path=out / "router_trace.csv")
    g_tool, g_other = hz.gate0_separation(rows)
    summary = hz._write_json(out / "router_trace_summary.json", {"mean_gate0_tool": g_tool, "mean_gate0_non_tool": g_other})
    run.record("router-trace", [out / "router_trace.csv", summary], [ck])


def cmd_report(run: RunDir, args) -> None:
    ck = run.require("pretrained", "pretrain")
    spec = hz.ExperimentSpec("citi_vs_baselines", {"vanilla": str(ck)}, run.config.experiment_params(), {"config_hash": run.config.hash()})
    run.record("report", hz.run_experiment(spec, run.reports() / "citi_vs_baselines", args.workers), [ck])


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "importance": cmd_importance,
    "icc": cmd_icc,
    "replace-eval": cmd_replace_eval,
    "select-train": cmd_select_train,
    "eval": cmd_eval,
    "router-trace": cmd_router_trace,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="citilab", description="Component-importance guided tool fine-tuning on a tiny transformer.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat object; omitted keys take defaults)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="base output directory")
    common.add_argument("--workers", type=int, default=1, help="evaluation threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "finetune":
            p.add_argument("--method", choices=("ft", "lora", "citi"), default="citi")
            p.add_argument("--no-molora", action="store_true", help="plain LoRA on the selected components")
            p.add_argument("--no-router-loss", action="store_true", help="router without suppression neuron or routing loss")
            p.add_argument("--no-rp", action="store_true", help="skip router pre-training")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        config = load_config(args.config, args.seed)
        run = RunDir(args.out, config)
        HANDLERS[args.command](run, args)
    except (ContractError, NumericFault) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 1
    print(run.root)
    return 0


if __name__ == "__main__":
    sys.exit(main())
