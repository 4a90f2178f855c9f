"""Three-stage CITI training (router pre-training, MoLoRA improvement,
unimportant-component optimization) and the FT / LoRA baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .importance import NormalizedScores, select_by_rank
from .model import ComponentId, Model, batch_nll, make_batch
from .molora import (
    MoLoRAConfig,
    adapter_routing_losses,
    attach_adapters,
    attach_lora,
    expert_param_names,
    lora_param_names,
    router_param_names,
)
from .numerics import Tensor
from .tasks import SyntheticExample

log = logging.getLogger(__name__)

STAGES = ("PRETRAIN", "RP", "MI", "UCO", "FT", "LORA", "SELECT")


@dataclass
class TrainConfig:
    lr_rp: float = 2e-4
    lr_mi: float = 2e-4
    lr_uco: float = 2e-5
    epochs_rp: int = 1
    epochs_mi: int = 2
    epochs_uco: int = 1
    batch_size: int = 8
    beta: float = 0.01
    delta: float = 0.95
    molora_fraction: float = 0.2
    uco_fraction: float = 0.1
    n_experts: int = 4
    rank: int = 8
    alpha: float = 2.0
    rp_router_loss_only: bool = False
    ft_lr: float = 2e-5
    lora_lr: float = 2e-4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    baseline_epochs: int = 2
    plain_lora_rank: int = 32
    plain_lora_alpha: float = 32.0
    select_epochs_ft: int = 1
    select_epochs_lora: int = 2
    # multiplies every fine-tuning learning rate; keeps their ratios intact
    lr_scale: float = 25.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("molora_fraction", "uco_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ContractError(f"TrainConfig.{name}={v} must lie in (0, 1]")
        for name in ("lr_rp", "lr_mi", "lr_uco", "ft_lr", "lora_lr", "lr_scale"):
            if getattr(self, name) <= 0:
                raise ContractError(f"TrainConfig.{name} must be positive")
        if not 0 <= self.delta <= 1:
            raise ContractError("TrainConfig.delta must lie in [0, 1]")

    def lr(self, name: str) -> float:
        return getattr(self, name) * self.lr_scale

    def molora(self, suppression: bool = True) -> MoLoRAConfig:
        return MoLoRAConfig(self.n_experts, self.rank, self.alpha, self.delta, suppression)


@dataclass
class StagePlan:
    stage: str
    trainable: frozenset
    lr: float
    epochs: int
    batch_size: int
    beta: float = 0.0
    delta: float = 0.95
    router_loss_only: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        self.trainable = frozenset(self.trainable)


def freeze_mask(model: Model, plan: StagePlan) -> dict[str, bool]:
    """Parameter name -> trainable flag for ``plan``; validates the plan against the model."""
    names = {p.name for p in model.parameters()}
    missing = sorted(plan.trainable - names)
    if missing:
        raise ContractError(f"{plan.stage}: plan names unknown parameters {missing[:3]}")
    routers = {p.name for ad in model.adapters.values() for p in ad.router_parameters()}
    experts = {p.name for ad in model.adapters.values() for p in ad.expert_parameters()}
    backbone = set(model.params)
    allowed = {"RP": routers, "MI": routers | experts, "UCO": backbone}.get(plan.stage)
    if allowed is not None:
        stray = sorted(plan.trainable - allowed)
        if stray:
            raise ContractError(f"{plan.stage}: parameters outside the stage's trainable set {stray[:3]}")
    return {p.name: p.name in plan.trainable for p in model.parameters()}


def combine_loss(nll, routing_losses: Sequence, beta: float):
    """NLL plus ``beta`` times the mean routing loss across adapters."""
    if not routing_losses:
        return nll
    mean_lr = routing_losses[0]
    for extra in routing_losses[1:]:
        mean_lr = mean_lr + extra
    mean_lr = mean_lr * (1.0 / len(routing_losses))
    return nll + mean_lr * beta


@dataclass
class LossParts:
    total: Tensor
    nll: float
    routing: float | None
    gate0_tool: float | None
    gate0_general: float | None


def total_loss(model: Model, batch: Sequence[SyntheticExample], beta: float, delta: float, router_loss_only: bool = False) -> LossParts:
    """Mean target NLL over the batch plus ``beta`` x mean routing loss."""
    if not batch:
        raise ContractError("total_loss: empty batch")
    b = make_batch([ex.pair() for ex in batch], model.config.max_seq_len)
    out = model.forward_batch(b.ids, b.lengths)
    nll = batch_nll(model, b, out)
    t = b.ids.shape[1]
    valid = np.arange(t)[None, :] < b.lengths[:, None]
    flags = np.repeat(np.array([ex.is_tool for ex in batch])[:, None], t, axis=1)
    losses = adapter_routing_losses(out.gates, valid, flags, delta, model)
    if router_loss_only and losses:
        total = combine_loss(nll * 0.0, losses, 1.0)
    else:
        total = combine_loss(nll, losses, beta)
    g0_tool = g0_gen = None
    suppressed = [g for cid, g in out.gates.items() if model.adapters[cid].has_suppression]
    if suppressed:
        g0 = np.stack([g.data[..., 0] for g in suppressed])
        tool_mask, gen_mask = valid & flags, valid & ~flags
        if tool_mask.any():
            g0_tool = float(g0[:, tool_mask].mean())
        if gen_mask.any():
            g0_gen = float(g0[:, gen_mask].mean())
    routing = float(np.mean([l.data for l in losses])) if losses else None
    return LossParts(total, float(nll.data), routing, g0_tool, g0_gen)


def train_stage(model: Model, plan: StagePlan, data: Sequence[SyntheticExample], seed: int = 0) -> tuple[Model, list[dict]]:
    """Run ``plan`` on ``model`` in place; only the plan's parameters move."""
    mask = freeze_mask(model, plan)
    params = model.parameters()
    saved = {p.name: p.trainable for p in params}
    for p in params:
        p.trainable = mask[p.name]
    trace: list[dict] = []
    try:
        if plan.epochs <= 0 or not data:
            return model, trace
        opt = nx.Adam([p for p in params if p.trainable], lr=plan.lr)
        step = 0
        for epoch in range(plan.epochs):
            order = nx.rng_for(seed, "shuffle", epoch).permutation(len(data))
            for start in range(0, len(order), plan.batch_size):
                batch = [data[int(i)] for i in order[start : start + plan.batch_size]]
                tape = nx.Tape()
                with tape:
                    parts = total_loss(model, batch, plan.beta, plan.delta, plan.router_loss_only)
                nx.zero_grads(params)
                if parts.total._tape is tape:
                    tape.backward(parts.total)
                opt.step()
                step += 1
                trace.append(
                    {
                        "stage": plan.stage,
                        "step": step,
                        "epoch": epoch,
                        "loss": float(parts.total.data),
                        "nll": parts.nll,
                        "routing_loss": parts.routing,
                        "gate0_tool": parts.gate0_tool,
                        "gate0_general": parts.gate0_general,
                    }
                )
            log.info("%s epoch %d loss %.4f", plan.stage, epoch, trace[-1]["loss"])
    finally:
        nx.zero_grads(params)
        for p in params:
            p.trainable = saved[p.name]
    return model, trace


def write_trace(trace: Iterable[dict], path: str | Path) -> Path:
    cols = ["stage", "step", "epoch", "loss", "nll", "routing_loss", "gate0_tool", "gate0_general"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])
    return Path(path)


# ---------------------------------------------------------------------------
# CITI planning and pipeline
# ---------------------------------------------------------------------------


def plan_stages(m_scores: NormalizedScores, c_scores: NormalizedScores, config: TrainConfig):
    """Adapter targets (top M_h), UCO targets (bottom C_h minus adapters) and the three plans."""
    config.validate()
    adapter_ids = sorted(select_by_rank(m_scores, "top", config.molora_fraction))
    candidates = sorted(select_by_rank(c_scores, "bottom", config.uco_fraction))
    uco_ids = [cid for cid in candidates if cid not in set(adapter_ids)]
    if not uco_ids:
        raise ContractError(
            f"plan_stages: all {len(candidates)} UCO candidates are adapter targets; "
            "raise uco_fraction or lower molora_fraction"
        )
    routers = {n for cid in adapter_ids for n in router_param_names(cid)}
    experts = {n for cid in adapter_ids for n in expert_param_names(cid, config.n_experts)}
    common = dict(batch_size=config.batch_size, beta=config.beta, delta=config.delta)
    plans = [
        StagePlan("RP", routers, config.lr("lr_rp"), config.epochs_rp, router_loss_only=config.rp_router_loss_only, **common),
        StagePlan("MI", routers | experts, config.lr("lr_mi"), config.epochs_mi, **common),
        StagePlan("UCO", {cid.param_name for cid in uco_ids}, config.lr("lr_uco"), config.epochs_uco, **common),
    ]
    return adapter_ids, uco_ids, plans


@dataclass
class CitiVariant:
    """Switches for the ablation rows; the default is full CITI."""

    molora: bool = True  # False: plain LoRA on the adapter targets
    router_loss: bool = True  # False: no suppression neuron and no routing loss
    rp: bool = True
    mi: bool = True
    uco: bool = True


@dataclass
class CitiResult:
    model: Model
    adapter_ids: list[ComponentId]
    uco_ids: list[ComponentId]
    trace: list[dict] = field(default_factory=list)
    checkpoints: dict[str, Model] = field(default_factory=dict)


def train_citi(
    pretrained: Model,
    m_scores: NormalizedScores,
    c_scores: NormalizedScores,
    data: Sequence[SyntheticExample],
    config: TrainConfig,
    variant: CitiVariant = CitiVariant(),
) -> CitiResult:
    """Run the staged pipeline on a copy of ``pretrained``.

    ``checkpoints`` keeps a snapshot after every stage that ran, keyed by stage.
    """
    adapter_ids, uco_ids, (rp, mi, uco) = plan_stages(m_scores, c_scores, config)
    model = pretrained.clone()
    result = CitiResult(model, adapter_ids, uco_ids)
    seed = config.seed
    if variant.mi or variant.rp:
        if variant.molora:
            attach_adapters(model, adapter_ids, config.molora(suppression=variant.router_loss), seed=seed)
        else:
            attach_lora(model, adapter_ids, config.plain_lora_rank, config.plain_lora_alpha, seed=seed)
    adapter_names = {p.name for p in model.adapter_parameters()}
    routers = {p.name for ad in model.adapters.values() for p in ad.router_parameters()}

    # without a routing loss the router gradient is identically zero while experts are zero
    if variant.rp and variant.molora and variant.router_loss:
        _, tr = train_stage(model, StagePlan("RP", routers, rp.lr, rp.epochs, rp.batch_size, rp.beta, rp.delta, rp.router_loss_only), data, seed)
        result.trace += tr
        result.checkpoints["RP"] = model.clone()
    if variant.mi:
        plan = StagePlan("MI", adapter_names, mi.lr, mi.epochs, mi.batch_size, mi.beta, mi.delta)
        _, tr = train_stage(model, plan, data, seed + 1)
        result.trace += tr
        result.checkpoints["MI"] = model.clone()
    if variant.uco:
        _, tr = train_stage(model, uco, data, seed + 2)
        result.trace += tr
        result.checkpoints["UCO"] = model.clone()
    return result


def pretrain(model: Model, data: Sequence[SyntheticExample], lr: float = 2e-3, epochs: int = 3, batch_size: int = 64, seed: int = 0) -> tuple[Model, list[dict]]:
    """Train every backbone weight of ``model`` in place on general-task data."""
    return train_stage(model, StagePlan("PRETRAIN", set(model.params), lr, epochs, batch_size), data, seed)


def baseline_train(model: Model, method: str, data: Sequence[SyntheticExample], config: TrainConfig) -> Model:
    """Full fine-tuning (``ft``) or LoRA on every component (``lora``) of a copy of ``model``."""
    out = model.clone()
    if method == "ft":
        plan = StagePlan("FT", set(out.params), config.lr("ft_lr"), config.baseline_epochs, config.batch_size)
    elif method == "lora":
        attach_lora(out, out.registry.ids(), config.lora_rank, config.lora_alpha, seed=config.seed)
        plan = StagePlan("LORA", {p.name for p in out.adapter_parameters()}, config.lr("lora_lr"), config.baseline_epochs, config.batch_size)
    else:
        raise ContractError(f"baseline_train: unknown method {method!r}")
    train_stage(out, plan, data, config.seed + 3)
    return out


def train_selected(model: Model, ids: Iterable[ComponentId], method: str, data: Sequence[SyntheticExample], config: TrainConfig) -> Model:
    """Fine-tune only ``ids`` (full weights for ``ft``, LoRA adapters for ``lora``)."""
    out = model.clone()
    ids = sorted(ids)
    if method == "ft":
        names = {cid.param_name for cid in ids}
        lr, epochs = config.lr("ft_lr"), config.select_epochs_ft
    elif method == "lora":
        attach_lora(out, ids, config.plain_lora_rank, config.plain_lora_alpha, seed=config.seed)
        names = {n for cid in ids for n in lora_param_names(cid)}
        lr, epochs = config.lr("lora_lr"), config.select_epochs_lora
    else:
        raise ContractError(f"train_selected: unknown method {method!r}")
    train_stage(out, StagePlan("SELECT", names, lr, epochs, config.batch_size), data, config.seed + 4)
    return out
