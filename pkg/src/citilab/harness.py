"""Evaluation metrics and experiment orchestration."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import icc as icc_mod
from .errors import ContractError
from .importance import (
    ImportanceTable,
    aggregate_general_scores,
    component_importance,
    expected_random_jaccard,
    jaccard_groups,
    normalize_tool_scores,
    rank_and_partition,
    replacement_experiment,
    select_by_rank,
)
from .model import ComponentId, Model, greedy_decode_batch, load_checkpoint, make_batch, parameter_bytes
from .tasks import (
    GENERAL_TASKS,
    VOCAB,
    ParseFailure,
    SyntheticExample,
    TaskKind,
    TaskSuite,
    build_suite,
    generate_dataset,
    mix_datasets,
    parse_tool_call,
    sample_probe_inputs,
)
from .trainer import CitiVariant, TrainConfig, baseline_train, train_citi, train_selected, write_trace

log = logging.getLogger(__name__)

ERROR_TYPES = ("NO_API_CALL", "API_NAME_MISMATCH", "INPUT_MISMATCH", "OUTPUT_MISMATCH")

# (model, prompts, max_new) -> continuations without the stop token
Decoder = Callable[[Model, Sequence[Sequence[int]], int], list[list[int]]]


def greedy_decoder(workers: int = 1) -> Decoder:
    """Greedy decoding; with ``workers > 1`` whole prompt-length groups are
    decoded on separate threads, so batches (and results) never depend on the
    worker count."""

    def decode(model: Model, prompts: Sequence[Sequence[int]], max_new: int) -> list[list[int]]:
        if workers <= 1:
            return greedy_decode_batch(model, prompts, max_new, VOCAB.eos)
        groups: dict[int, list[int]] = {}
        for i, p in enumerate(prompts):
            groups.setdefault(len(p), []).append(i)
        jobs = [groups[k] for k in sorted(groups)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: greedy_decode_batch(model, [prompts[i] for i in idx], max_new, VOCAB.eos), jobs))
        out: list[list[int]] = [[] for _ in prompts]
        for idx, res in zip(jobs, parts):
            for i, r in zip(idx, res):
                out[i] = r
        return out

    return decode


def _max_new(examples: Sequence[SyntheticExample]) -> int:
    return max(len(ex.target) for ex in examples) + 4


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS-based F-measure between token sequences."""
    if len(reference) == 0:
        raise ContractError("rouge_l: empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def classify_tool_output(output: Sequence[int], gold) -> str | None:
    """``None`` when ``output`` is a correct call, else one of ERROR_TYPES."""
    parsed = parse_tool_call(output)
    if isinstance(parsed, ParseFailure):
        if parsed.reason == "NO_CALL_TOKEN":
            return "NO_API_CALL"
        return "API_NAME_MISMATCH" if parsed.reason == "NAME_MALFORMED" else "INPUT_MISMATCH"
    if parsed.name != gold.name:
        return "API_NAME_MISMATCH"
    if sorted(parsed.args) != sorted(gold.args):
        return "INPUT_MISMATCH"
    if parsed.trailing:
        return "OUTPUT_MISMATCH"
    return None


@dataclass
class ToolEval:
    correctness: float
    rouge_l: float
    taxonomy: dict[str, int]
    n: int


def evaluate_toolcalls(model: Model, testset: Sequence[SyntheticExample], decoder: Decoder | None = None) -> ToolEval:
    if not testset:
        raise ContractError("evaluate_toolcalls: empty testset")
    if any(not ex.is_tool for ex in testset):
        raise ContractError("evaluate_toolcalls: testset contains non-tool examples")
    decoder = decoder or greedy_decoder()
    outputs = decoder(model, [ex.prompt for ex in testset], _max_new(testset))
    counts = {t: 0 for t in ERROR_TYPES}
    correct, rouge = 0, 0.0
    for ex, out in zip(testset, outputs):
        gold_ids = list(ex.target[:-1])
        gold = parse_tool_call(gold_ids)
        if isinstance(gold, ParseFailure):
            raise ContractError(f"evaluate_toolcalls: gold target does not parse ({gold.reason})")
        err = classify_tool_output(out, gold)
        if err is None:
            correct += 1
        else:
            counts[err] += 1
        rouge += rouge_l(out, gold_ids)
    n = len(testset)
    return ToolEval(correct / n, rouge / n, counts, n)


def evaluate_general(model: Model, testsets: Mapping, decoder: Decoder | None = None) -> dict[str, float]:
    """Exact-match accuracy of the greedy continuation per task."""
    decoder = decoder or greedy_decoder()
    out = {}
    for task, exs in testsets.items():
        if not exs:
            raise ContractError(f"evaluate_general: empty testset for {task}")
        preds = decoder(model, [ex.prompt for ex in exs], _max_new(exs))
        hits = sum(list(p) == list(ex.target[:-1]) for p, ex in zip(preds, exs))
        out[TaskKind(task).value] = hits / len(exs)
    return out


def checkpoint_id(model: Model) -> str:
    h = hashlib.sha256()
    for name, data in sorted(parameter_bytes(model).items()):
        h.update(name.encode())
        h.update(data)
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    tool_correctness: float
    rouge_l: float
    taxonomy: dict[str, int]
    n_tool: int
    retention: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in {**self.accuracy, "C": self.tool_correctness, "R": self.rouge_l}.items():
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"EvalReport: {k}={v} outside [0, 1]")
        failures = round((1 - self.tool_correctness) * self.n_tool)
        if sum(self.taxonomy.values()) != failures:
            raise ContractError("EvalReport: taxonomy counts do not sum to the failure count")

    @property
    def mean_general(self) -> float:
        return float(np.mean([self.accuracy[k.value] for k in GENERAL_TASKS]))

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_model(
    model: Model,
    tests: Mapping[TaskKind, Sequence[SyntheticExample]],
    reference: Mapping[str, float] | None = None,
    metadata: Mapping | None = None,
    decoder: Decoder | None = None,
) -> EvalReport:
    """Tool metrics plus general accuracy; ``reference`` gives pretrained accuracy for retention."""
    tool = evaluate_toolcalls(model, tests[TaskKind.TOOLCALL], decoder)
    acc = evaluate_general(model, {k: tests[k] for k in GENERAL_TASKS}, decoder)
    retention = {k: acc[k] - reference[k] for k in acc} if reference else {}
    meta = {"checkpoint": checkpoint_id(model), **(metadata or {})}
    return EvalReport(acc, tool.correctness, tool.rouge_l, tool.taxonomy, tool.n, retention, meta)


# ---------------------------------------------------------------------------
# router traces
# ---------------------------------------------------------------------------


def export_router_traces(model: Model, inputs: Sequence[SyntheticExample], adapter_ids: Sequence[ComponentId] | None = None, path: str | Path | None = None) -> list[dict]:
    """One row per (input, adapter, token) with the full gate vector.

    Tokens are the teacher-forced model inputs (prompt plus target minus its final token).
    """
    routed = sorted(cid for cid, ad in model.adapters.items() if ad.router_parameters())
    if not routed:
        raise ContractError("export_router_traces: model has no routed adapters")
    ids = routed if adapter_ids is None else sorted(adapter_ids)
    for cid in ids:
        if cid not in routed:
            raise ContractError(f"export_router_traces: {cid} has no router")
    rows: list[dict] = []
    for n, ex in enumerate(inputs):
        batch = make_batch([ex.pair()], model.config.max_seq_len)
        out = model.forward_batch(batch.ids, batch.lengths)
        length = int(batch.lengths[0])
        for cid in ids:
            gates = out.gates[cid].data[0, :length]
            for t in range(length):
                rows.append({"input": n, "adapter": str(cid), "token": t, "is_tool": ex.is_tool, "gate": [float(g) for g in gates[t]]})
    if path is not None:
        width = max(len(r["gate"]) for r in rows)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["input", "adapter", "token", "is_tool"] + [f"g{i}" for i in range(width)])
            for r in rows:
                w.writerow([r["input"], r["adapter"], r["token"], int(r["is_tool"])] + [repr(g) for g in r["gate"]])
    return rows


def gate0_separation(rows: Sequence[dict]) -> tuple[float, float]:
    """Mean gate entry 0 over (tool rows, non-tool rows)."""
    tool = [r["gate"][0] for r in rows if r["is_tool"]]
    other = [r["gate"][0] for r in rows if not r["is_tool"]]
    if not tool or not other:
        raise ContractError("gate0_separation: need both tool and non-tool rows")
    return float(np.mean(tool)), float(np.mean(other))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

EXPERIMENT_KINDS = ("replacement", "jaccard", "selective", "icc", "citi_vs_baselines")

REQUIRED_CHECKPOINTS = {
    "replacement": ("vanilla", "finetuned"),
    "jaccard": ("vanilla",),
    "selective": ("vanilla",),
    "icc": ("vanilla", "tool_sft", "alt_sft"),
    "citi_vs_baselines": ("vanilla",),
}

TABLE_ROWS = ("vanilla", "FT", "LoRA", "CITI", "RP+MI", "UCO-only", "w/o L_r", "w/o RP", "w/o MOLoRA")


@dataclass
class ExperimentParams:
    seed: int = 0
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
    rows: tuple = TABLE_ROWS
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ExperimentParams":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ContractError(f"ExperimentParams: unknown key {extra[0]!r}")
        kw = dict(data)
        if isinstance(kw.get("train"), Mapping):
            kw["train"] = TrainConfig(**kw["train"])
        for k in ("fractions", "modes", "selective_modes", "rows"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def suite(self) -> TaskSuite:
        # pretraining corpora are not needed for evaluation
        return build_suite(self.seed, pretrain_per_task=1, tool_train=self.tool_train, general_train=self.general_train, test_per_task=self.test_per_task)


@dataclass
class ExperimentSpec:
    kind: str
    checkpoints: dict[str, str]
    params: ExperimentParams = field(default_factory=ExperimentParams)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ContractError(f"ExperimentSpec: unknown kind {self.kind!r}")
        for role in REQUIRED_CHECKPOINTS[self.kind]:
            if role not in self.checkpoints:
                raise ContractError(f"ExperimentSpec: {self.kind} needs a {role!r} checkpoint")
            path = Path(self.checkpoints[role])
            if not (path / "manifest.json").is_file():
                raise ContractError(f"ExperimentSpec: missing checkpoint {path}")
        if self.kind == "citi_vs_baselines":
            unknown = sorted(set(self.params.rows) - set(TABLE_ROWS))
            if unknown:
                raise ContractError(f"ExperimentSpec: unknown table rows {unknown}")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return v

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([cell(v) for v in r])
    return path


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def importance_tables(model: Model, suite: TaskSuite, params: ExperimentParams) -> dict[str, ImportanceTable]:
    """Tool and per-general-task importance tables, all on ``model``."""
    out = {}
    for kind in (TaskKind.TOOLCALL, *GENERAL_TASKS):
        out[kind.value] = component_importance(model, suite.finetune[kind], params.importance_samples, params.seed, label=kind.value)
    return out


def selection_scores(tables: Mapping[str, ImportanceTable]):
    m = normalize_tool_scores(tables[TaskKind.TOOLCALL.value])
    c = aggregate_general_scores([tables[k.value] for k in GENERAL_TASKS])
    return m, c


def mixed_training_data(suite: TaskSuite, seed: int) -> list[SyntheticExample]:
    return mix_datasets(suite.finetune[TaskKind.TOOLCALL], {k: suite.finetune[k] for k in GENERAL_TASKS}, seed=seed)


REPORT_COLUMNS = ["row", "C (parse-match)", "R"] + [k.value for k in GENERAL_TASKS] + ["mean_general"] + [f"retention_{k.value}" for k in GENERAL_TASKS] + list(ERROR_TYPES)


def report_row(name: str, rep: EvalReport) -> list:
    return (
        [name, rep.tool_correctness, rep.rouge_l]
        + [rep.accuracy[k.value] for k in GENERAL_TASKS]
        + [rep.mean_general]
        + [rep.retention.get(k.value) for k in GENERAL_TASKS]
        + [rep.taxonomy[t] for t in ERROR_TYPES]
    )


def train_table_models(vanilla: Model, suite: TaskSuite, params: ExperimentParams, rows: Sequence[str], scores=None, traces: dict | None = None) -> dict[str, Model]:
    """Train every fine-tuned row of the comparison table that is requested."""
    cfg = params.train
    tool = suite.finetune[TaskKind.TOOLCALL]
    mixed = mixed_training_data(suite, params.seed)
    if scores is None:
        scores = selection_scores(importance_tables(vanilla, suite, params))
    m_scores, c_scores = scores
    models: dict[str, Model] = {}
    traces = traces if traces is not None else {}
    if "vanilla" in rows:
        models["vanilla"] = vanilla
    if "FT" in rows:
        models["FT"] = baseline_train(vanilla, "ft", tool, cfg)
    if "LoRA" in rows:
        models["LoRA"] = baseline_train(vanilla, "lora", tool, cfg)
    if "CITI" in rows or "RP+MI" in rows:
        res = train_citi(vanilla, m_scores, c_scores, mixed, cfg)
        traces["CITI"] = res.trace
        models["RP+MI"], models["CITI"] = res.checkpoints["MI"], res.model
    variants = {
        "UCO-only": CitiVariant(rp=False, mi=False),
        "w/o L_r": CitiVariant(router_loss=False, uco=False),
        "w/o RP": CitiVariant(rp=False),
        "w/o MOLoRA": CitiVariant(molora=False, uco=False),
    }
    for name, variant in variants.items():
        if name in rows:
            res = train_citi(vanilla, m_scores, c_scores, mixed, cfg, variant)
            traces[name] = res.trace
            models[name] = res.model
    return {r: models[r] for r in rows}


def _slug(name: str) -> str:
    return name.replace("/", "").replace("+", "_").replace(" ", "_").lower()


def run_experiment(spec: ExperimentSpec, out_dir: str | Path, workers: int = 1) -> list[Path]:
    """Execute ``spec`` and write its reports into ``out_dir``; returns written paths."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = {role: load_checkpoint(p) for role, p in spec.checkpoints.items()}
    vanilla = models["vanilla"]
    for role, m in models.items():
        if m.config != vanilla.config:
            raise ContractError(f"ExperimentSpec: checkpoint {role!r} has a different model config")
    params = spec.params
    suite = params.suite()
    decoder = greedy_decoder(workers)
    meta = dict(spec.metadata, seed=params.seed, kind=spec.kind)
    written: list[Path] = []

    if spec.kind == "replacement":
        tables = {k.value: component_importance(vanilla, suite.finetune[k], params.importance_samples, params.seed, label=k.value) for k in GENERAL_TASKS}
        rows = []
        for kind in GENERAL_TASKS:
            scores = normalize_tool_scores(tables[kind.value])
            evaluate = lambda m, kind=kind: evaluate_general(m, {kind: suite.test[kind]}, decoder)
            base = evaluate(vanilla)[kind.value]
            for r in replacement_experiment(vanilla, models["finetuned"], scores, params.fractions, params.modes, evaluate):
                rows.append([kind.value, r["mode"], r["fraction"], r["n_swapped"], r[kind.value], base - r[kind.value]])
        ft_acc = evaluate_general(models["finetuned"], {k: suite.test[k] for k in GENERAL_TASKS}, decoder)
        for kind in GENERAL_TASKS:
            rows.append([kind.value, "finetuned", None, None, ft_acc[kind.value], None])
        written.append(_write_csv(out / "replacement.csv", ["task", "mode", "fraction", "n_swapped", "accuracy", "drop"], rows))

    elif spec.kind == "jaccard":
        tables = importance_tables(vanilla, suite, params)
        parts = {label: rank_and_partition(t) for label, t in tables.items()}
        groups = jaccard_groups(parts)
        n = len(vanilla.registry)
        rows = []
        for group, pairs in groups.items():
            k = len(parts[TaskKind.TOOLCALL.value].groups()[group])
            null = expected_random_jaccard(n, k, k)
            for (a, b), j in pairs.items():
                rows.append([group, a, b, j, null])
        written.append(_write_csv(out / "jaccard.csv", ["group", "task_a", "task_b", "jaccard", "null_expectation"], rows))
        written.append(_write_json(out / "importance.json", {label: t.to_json() for label, t in tables.items()}))

    elif spec.kind == "selective":
        tables = importance_tables(vanilla, suite, params)
        m_scores = normalize_tool_scores(tables[TaskKind.TOOLCALL.value])
        mixed = mixed_training_data(suite, params.seed)
        ref = evaluate_general(vanilla, {k: suite.test[k] for k in GENERAL_TASKS}, decoder)
        rows = []
        for method in ("lora", "ft"):
            for mode in params.selective_modes:
                ids = select_by_rank(m_scores, mode, params.selective_fraction, params.seed)
                trained = train_selected(vanilla, ids, method, mixed, params.train)
                rep = evaluate_model(trained, suite.test, ref, meta, decoder)
                rows.append(report_row(f"{method}-{mode}", rep))
        written.append(_write_csv(out / "selective.csv", REPORT_COLUMNS, rows))

    elif spec.kind == "icc":
        probes = {k.value: sample_probe_inputs(suite.test[k], min(params.probe_samples, len(suite.test[k])), params.seed) for k in (TaskKind.TOOLCALL, *GENERAL_TASKS)}
        rep = icc_mod.co_directional_report(vanilla, models["tool_sft"], models["alt_sft"], probes, TaskKind.TOOLCALL.value)
        icc_mod.export_report(rep, out / "icc.csv", out / "icc_summary.json")
        written += [out / "icc.csv", out / "icc_summary.json"]

    elif spec.kind == "citi_vs_baselines":
        tables = importance_tables(vanilla, suite, params)
        traces: dict[str, list] = {}
        trained = train_table_models(vanilla, suite, params, params.rows, selection_scores(tables), traces)
        ref = evaluate_general(vanilla, {k: suite.test[k] for k in GENERAL_TASKS}, decoder)
        reports = {name: evaluate_model(m, suite.test, ref, meta, decoder) for name, m in trained.items()}
        written.append(_write_csv(out / "citi_vs_baselines.csv", REPORT_COLUMNS, [report_row(n, r) for n, r in reports.items()]))
        written.append(_write_json(out / "citi_vs_baselines.json", {n: r.to_json() for n, r in reports.items()}))
        for name, tr in traces.items():
            written.append(write_trace(tr, out / f"trace_{_slug(name)}.csv"))
        if "CITI" in trained:
            mixed_test = list(suite.test[TaskKind.TOOLCALL]) + [ex for k in GENERAL_TASKS for ex in suite.test[k]]
            rows = export_router_traces(trained["CITI"], mixed_test, path=out / "router_trace_citi.csv")
            g_tool, g_other = gate0_separation(rows)
            written.append(out / "router_trace_citi.csv")
            written.append(_write_json(out / "router_summary.json", {"mean_gate0_tool": g_tool, "mean_gate0_non_tool": g_other}))
    return written


def alt_training_data(params: ExperimentParams) -> list[SyntheticExample]:
    """Alternate-task corpus for the co-directional control, sized like the tool set."""
    return generate_dataset(TaskKind(params.alt_task), params.tool_train, params.seed * 10 + 7)
