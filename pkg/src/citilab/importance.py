"""First-order component importance, normalizations, rankings and overlap analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import hypergeom

from . import numerics as nx
from .errors import ContractError, NumericFault
from .model import ComponentId, Model, batch_nll, make_batch, mean_nll
from .tasks import SyntheticExample


@dataclass
class ImportanceTable:
    label: str
    scores: dict[ComponentId, float]
    n_samples: int
    checkpoint: str = ""

    def __post_init__(self):
        for cid, s in self.scores.items():
            if not math.isfinite(s) or s < 0:
                raise ContractError(f"ImportanceTable: bad score {s} for {cid}")

    @property
    def total(self) -> float:
        return float(sum(self.scores.values()))

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "n_samples": self.n_samples,
            "checkpoint": self.checkpoint,
            "scores": {str(cid): self.scores[cid] for cid in sorted(self.scores)},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "ImportanceTable":
        scores = {ComponentId.parse(k): float(v) for k, v in data["scores"].items()}
        return cls(data["label"], scores, int(data["n_samples"]), data.get("checkpoint", ""))


@dataclass
class NormalizedScores:
    kind: str  # "M" (tool) or "C" (general aggregate)
    scores: dict[ComponentId, float]


@dataclass
class RankingPartition:
    order: list[ComponentId]
    high: list[ComponentId] = field(default_factory=list)
    moderate: list[ComponentId] = field(default_factory=list)
    low: list[ComponentId] = field(default_factory=list)

    def groups(self) -> dict[str, list[ComponentId]]:
        return {"high": self.high, "moderate": self.moderate, "low": self.low}


def sample_examples(dataset: Sequence[SyntheticExample], n_samples: int, seed: int) -> list[SyntheticExample]:
    """The examples ``component_importance`` scores for this (n_samples, seed), in canonical order."""
    if n_samples < 1:
        raise ContractError("component_importance: n_samples must be >= 1")
    if n_samples >= len(dataset):
        picked = list(dataset)
    else:
        idx = nx.rng_for(seed, "sampling").choice(len(dataset), size=n_samples, replace=False)
        picked = [dataset[int(i)] for i in idx]
    # canonical order makes the reduction independent of dataset order
    return sorted(picked, key=lambda ex: (ex.prompt, ex.target))


def component_importance(
    model: Model,
    dataset: Sequence[SyntheticExample],
    n_samples: int = 512,
    seed: int = 0,
    label: str = "",
    batch_size: int = 128,
    loss_scale: float = 1.0,
) -> ImportanceTable:
    """I_h = |sum(theta_h * dL/dtheta_h)| for the mean target-token NLL over a sample."""
    examples = sample_examples(dataset, n_samples, seed)
    pairs = [ex.pair() for ex in examples]
    batches = [make_batch(pairs[i : i + batch_size], model.config.max_seq_len) for i in range(0, len(pairs), batch_size)]
    n_tokens = sum(b.n_tokens for b in batches)

    params = model.parameters()
    saved = {p.name: (p.trainable, p.grad) for p in params}
    targets = {p.name for _, p in model.registry}
    for p in params:
        p.trainable, p.grad = p.name in targets, None
    try:
        for b in batches:
            tape = nx.Tape()
            with tape:
                loss = batch_nll(model, b, denominator=n_tokens / loss_scale)
            tape.backward(loss)
        scores = {}
        for cid, p in model.registry:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericFault(str(cid), "non-finite gradient")
            scores[cid] = abs(float(np.sum(p.data.astype(np.float64) * g.astype(np.float64))))
    finally:
        for p in params:
            p.trainable, p.grad = saved[p.name]
    return ImportanceTable(label, scores, len(examples))


def ablate_component(model: Model, cid: ComponentId, dataset: Sequence[SyntheticExample]) -> float:
    """|L(theta) - L(theta | theta_h = 0)| on ``dataset``; the model is restored afterwards."""
    p = model.registry.param(cid)
    pairs = [ex.pair() for ex in sorted(dataset, key=lambda ex: (ex.prompt, ex.target))]
    base = mean_nll(model, pairs)
    saved = p.data.copy()
    try:
        p.data[...] = 0
        ablated = mean_nll(model, pairs)
    finally:
        p.data[...] = saved
    return abs(base - ablated)


def normalize_tool_scores(table: ImportanceTable) -> NormalizedScores:
    total = table.total
    if total <= 0:
        raise ContractError(f"normalize_tool_scores: table {table.label!r} has no positive score")
    return NormalizedScores("M", {cid: s / total for cid, s in table.scores.items()})


def aggregate_general_scores(tables: Sequence[ImportanceTable]) -> NormalizedScores:
    """Sum over tasks of each component's share of that task's total importance."""
    if not tables:
        raise ContractError("aggregate_general_scores: no tables")
    keys = set(tables[0].scores)
    for t in tables[1:]:
        if set(t.scores) != keys:
            raise ContractError(f"aggregate_general_scores: table {t.label!r} covers a different registry")
    out = {cid: 0.0 for cid in sorted(keys)}
    for t in tables:
        total = t.total
        if total <= 0:
            raise ContractError(f"aggregate_general_scores: table {t.label!r} has no positive score")
        for cid in out:
            out[cid] += t.scores[cid] / total
    return NormalizedScores("C", out)


def _ranked(scores: Mapping[ComponentId, float]) -> list[ComponentId]:
    return sorted(scores, key=lambda cid: (-scores[cid], cid.key))


def rank_and_partition(scores: NormalizedScores | ImportanceTable) -> RankingPartition:
    order = _ranked(scores.scores)
    n = len(order)
    base, extra = divmod(n, 3)
    sizes = [base + (1 if i < extra else 0) for i in range(3)]
    a, b = sizes[0], sizes[0] + sizes[1]
    return RankingPartition(order, order[:a], order[a:b], order[b:])


def jaccard_index(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_by_rank(scores: NormalizedScores, mode: str, fraction: float, seed: int = 0) -> set[ComponentId]:
    if not 0 < fraction <= 1:
        raise ContractError(f"select_by_rank: fraction {fraction} outside (0, 1]")
    order = _ranked(scores.scores)
    k = round_half_up(fraction * len(order))
    if mode == "top":
        return set(order[:k])
    if mode == "bottom":
        return set(order[len(order) - k :])
    if mode == "random":
        ids = sorted(scores.scores, key=lambda c: c.key)
        picks = nx.rng_for(seed, "sampling").choice(len(ids), size=k, replace=False)
        return {ids[int(i)] for i in picks}
    raise ContractError(f"select_by_rank: unknown mode {mode!r}")


def expected_random_jaccard(n: int, k1: int, k2: int) -> float:
    """E[J] for independent uniformly random subsets of sizes k1, k2 out of n."""
    dist = hypergeom(n, k1, k2)
    lo, hi = max(0, k1 + k2 - n), min(k1, k2)
    total = 0.0
    for x in range(lo, hi + 1):
        union = k1 + k2 - x
        total += dist.pmf(x) * (x / union if union else 1.0)
    return float(total)


def jaccard_groups(partitions: Mapping[str, RankingPartition]) -> dict[str, dict[tuple[str, str], float]]:
    """Pairwise Jaccard between tasks for each importance group."""
    labels = list(partitions)
    out: dict[str, dict[tuple[str, str], float]] = {}
    for group in ("high", "moderate", "low"):
        out[group] = {
            (a, b): jaccard_index(partitions[a].groups()[group], partitions[b].groups()[group])
            for a in labels
            for b in labels
        }
    return out


def replacement_experiment(
    vanilla: Model,
    finetuned: Model,
    scores: NormalizedScores,
    fractions: Sequence[float],
    modes: Sequence[str],
    evaluate: Callable[[Model], Mapping[str, float]],
) -> list[dict]:
    """Swap top/bottom-ranked components of ``vanilla`` for fine-tuned weights and evaluate.

    A fraction of 0 swaps nothing. Rows carry ``mode``, ``fraction``, ``n_swapped``
    and every metric returned by ``evaluate``.
    """
    from .model import swap_component_weights

    rows = []
    for mode in modes:
        for frac in fractions:
            ids = set() if frac == 0 else select_by_rank(scores, mode, frac)
            swapped = swap_component_weights(vanilla, finetuned, ids)
            metrics = dict(evaluate(swapped))
            rows.append({"mode": mode, "fraction": frac, "n_swapped": len(ids), **metrics})
    return rows


def export_scores(table: ImportanceTable, normalized: NormalizedScores, csv_path: str | Path, json_path: str | Path | None = None) -> None:
    order = _ranked(normalized.scores)
    rank = {cid: i + 1 for i, cid in enumerate(order)}
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "layer", "slot", "raw", "normalized", "rank"])
        for cid in sorted(table.scores, key=lambda c: c.key):
            w.writerow([str(cid), cid.layer, cid.slot, repr(table.scores[cid]), repr(normalized.scores[cid]), rank[cid]])
    if json_path is not None:
        part = rank_and_partition(normalized)
        payload = {
            **table.to_json(),
            "kind": normalized.kind,
            "normalized": {str(c): normalized.scores[c] for c in sorted(normalized.scores, key=lambda c: c.key)},
            "partition": {g: [str(c) for c in ids] for g, ids in part.groups().items()},
        }
        Path(json_path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
