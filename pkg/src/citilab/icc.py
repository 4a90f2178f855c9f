"""Incremental change of capability (ICC): per-layer mean shifts of last-token
hidden states between a reference and a fine-tuned model, and their cosine
similarities across tasks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericFault
from .model import SITES, Model, ProbeSite, all_probe_sites

# (model, batch of equal-length token lists, probe sites) -> {site: (B, d) array}
CaptureFn = Callable[[Model, Sequence[Sequence[int]], Sequence[ProbeSite]], Mapping[ProbeSite, np.ndarray]]

NORM_FLOOR = 1e-12


@dataclass
class ICCProfile:
    label: str
    site: str
    vectors: np.ndarray  # (n_layers, d_model)
    n_samples: int

    def __post_init__(self):
        if self.site not in SITES:
            raise ContractError(f"ICCProfile: unknown site {self.site!r}")
        if self.vectors.ndim != 2:
            raise ContractError("ICCProfile: vectors must be (layers, d_model)")
        if not np.isfinite(self.vectors).all():
            raise NumericFault(f"icc:{self.label}")

    @property
    def n_layers(self) -> int:
        return self.vectors.shape[0]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


def _default_capture(model: Model, batch: Sequence[Sequence[int]], sites: Sequence[ProbeSite]):
    ids = np.asarray(batch, dtype=np.int64)
    out = model.forward_batch(ids, probes=sites)
    return {s: out.captures[s] for s in sites}


def collect_mean_hidden(
    model: Model,
    probe_inputs: Sequence[Sequence[int]],
    site: str,
    capture_fn: CaptureFn | None = None,
    batch_size: int = 128,
) -> np.ndarray:
    """Per-layer mean of last-token states at ``site``; shape (n_layers, d_model).

    Inputs are grouped by length so no padding enters the forward pass; the
    float64 reduction runs in input order.
    """
    if not probe_inputs:
        raise ContractError("collect_mean_hidden: empty probe set")
    if site not in SITES:
        raise ContractError(f"collect_mean_hidden: unknown site {site!r}")
    limit = model.config.max_seq_len
    for seq in probe_inputs:
        if not 0 < len(seq) <= limit:
            raise ContractError(f"collect_mean_hidden: probe input length {len(seq)} outside [1, {limit}]")
    capture = capture_fn or _default_capture
    sites = all_probe_sites(model.config.n_layers, site)
    rows = np.zeros((len(probe_inputs), model.config.n_layers, model.config.d_model))
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(probe_inputs):
        by_len.setdefault(len(seq), []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            caps = capture(model, [list(probe_inputs[i]) for i in chunk], sites)
            for layer, s in enumerate(sites):
                rows[chunk, layer] = np.asarray(caps[s], dtype=np.float64)
    return rows.sum(axis=0) / len(probe_inputs)


def _check_pair(a: Model, b: Model) -> None:
    if a.config != b.config:
        raise ContractError("compute_icc: reference and fine-tuned model configs differ")


def compute_icc(ref_model: Model, sft_model: Model, probe_inputs: Sequence[Sequence[int]], site: str, label: str = "", capture_fn: CaptureFn | None = None) -> ICCProfile:
    """Mean last-token state of ``sft_model`` minus that of ``ref_model``, per layer."""
    _check_pair(ref_model, sft_model)
    ref = collect_mean_hidden(ref_model, probe_inputs, site, capture_fn)
    sft = collect_mean_hidden(sft_model, probe_inputs, site, capture_fn)
    return ICCProfile(label, site, sft - ref, len(probe_inputs))


def cosine_similarity(a: ICCProfile, b: ICCProfile) -> list[float | None]:
    """Per-layer cosine; ``None`` where either increment is numerically zero."""
    if a.site != b.site:
        raise ContractError(f"cosine_similarity: sites differ ({a.site} vs {b.site})")
    if a.vectors.shape != b.vectors.shape:
        raise ContractError(f"cosine_similarity: profile shapes differ {a.vectors.shape} vs {b.vectors.shape}")
    out: list[float | None] = []
    for va, vb in zip(a.vectors, b.vectors):
        na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
        if na < NORM_FLOOR or nb < NORM_FLOOR:
            out.append(None)
        else:
            out.append(float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0)))
    return out


@dataclass
class SimilarityMatrix:
    site: str
    labels: list[str]
    values: list[list[list[float | None]]]  # [row][col][layer]

    def at(self, row: str, col: str) -> list[float | None]:
        return self.values[self.labels.index(row)][self.labels.index(col)]


def similarity_matrix(profiles: Mapping[str, ICCProfile]) -> SimilarityMatrix:
    labels = list(profiles)
    if not labels:
        raise ContractError("similarity_matrix: no profiles")
    site = profiles[labels[0]].site
    values = [[cosine_similarity(profiles[r], profiles[c]) for c in labels] for r in labels]
    return SimilarityMatrix(site, labels, values)


def layer_mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class CoDirectionalReport:
    tool_label: str
    tasks: list[str]
    sites: list[str]
    # (site, task, condition) -> per-layer similarity with the tool increment
    curves: dict[tuple[str, str, str], list[float | None]] = field(default_factory=dict)
    profiles: dict[tuple[str, str, str], ICCProfile] = field(default_factory=dict)

    def mean_over_layers(self, site: str, task: str, condition: str) -> float | None:
        return layer_mean(self.curves[(site, task, condition)])

    def tool_exceeds_alt(self, site: str, task: str) -> bool | None:
        a = self.mean_over_layers(site, task, "tool")
        b = self.mean_over_layers(site, task, "alt")
        return None if a is None or b is None else a > b

    def flagged_layers(self, site: str, task: str) -> list[int]:
        tool, alt = self.curves[(site, task, "tool")], self.curves[(site, task, "alt")]
        return [i for i, (a, b) in enumerate(zip(tool, alt)) if a is not None and b is not None and a > b]

    def summary(self) -> dict:
        out: dict = {"tool_label": self.tool_label, "sites": {}}
        for site in self.sites:
            rows = {}
            for task in self.tasks:
                rows[task] = {
                    "mean_tool_condition": self.mean_over_layers(site, task, "tool"),
                    "mean_alt_condition": self.mean_over_layers(site, task, "alt"),
                    "tool_exceeds_alt": self.tool_exceeds_alt(site, task),
                    "layers_tool_exceeds_alt": self.flagged_layers(site, task),
                }
            n_exceed = sum(1 for r in rows.values() if r["tool_exceeds_alt"])
            out["sites"][site] = {"tasks": rows, "n_tasks_tool_exceeds_alt": n_exceed}
        return out


def co_directional_report(
    ref: Model,
    tool_sft: Model,
    alt_sft: Model,
    probes: Mapping[str, Sequence[Sequence[int]]],
    tool_label: str,
    sites: Sequence[str] = SITES,
    capture_fn: CaptureFn | None = None,
) -> CoDirectionalReport:
    """Similarity of each task's increment to the tool increment, per layer.

    Condition "tool": both increments from the tool-trained model. Condition
    "alt": tool increment from the tool-trained model, task increment from the
    model trained on the alternate task.
    """
    _check_pair(ref, tool_sft)
    _check_pair(ref, alt_sft)
    if tool_label not in probes:
        raise ContractError(f"co_directional_report: no probes for {tool_label!r}")
    tasks = [t for t in probes if t != tool_label]
    report = CoDirectionalReport(tool_label, tasks, list(sites))
    for site in sites:
        tool_icc = compute_icc(ref, tool_sft, probes[tool_label], site, tool_label, capture_fn)
        report.profiles[(site, tool_label, "tool")] = tool_icc
        for task in tasks:
            for cond, model in (("tool", tool_sft), ("alt", alt_sft)):
                prof = compute_icc(ref, model, probes[task], site, task, capture_fn)
                report.profiles[(site, task, cond)] = prof
                report.curves[(site, task, cond)] = cosine_similarity(tool_icc, prof)
    return report


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def export_report(report: CoDirectionalReport, csv_path: str | Path, json_path: str | Path) -> None:
    """CSV rows (layer, site, pair, value); undefined cosines are left empty."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "site", "pair", "value"])
        for site in report.sites:
            for task in report.tasks:
                for cond in ("tool", "alt"):
                    pair = f"{report.tool_label}~{task}@{cond}"
                    for layer, v in enumerate(report.curves[(site, task, cond)]):
                        w.writerow([layer, site, pair, _fmt(v)])
    Path(json_path).write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")


def export_similarity(matrix: SimilarityMatrix, csv_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "site", "pair", "value"])
        for i, r in enumerate(matrix.labels):
            for j, c in enumerate(matrix.labels):
                for layer, v in enumerate(matrix.values[i][j]):
                    w.writerow([layer, matrix.site, f"{r}~{c}", _fmt(v)])


def is_undefined(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))
