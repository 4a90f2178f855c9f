"""Mixture-of-LoRA adapters with a suppression-neuron router, plus plain LoRA.

Router output entry 0 is the probability that a token is tool-unrelated; it
feeds no expert, so its mass shrinks every expert's contribution. Experts
``0..N-1`` are weighted by gate entries ``1..N``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .model import ComponentId, Model
from .numerics import Parameter, Tensor


@dataclass(frozen=True)
class MoLoRAConfig:
    n_experts: int = 4
    rank: int = 8
    alpha: float = 2.0
    delta: float = 0.95
    # False drops the extra router neuron (the "w/o L_r" ablation router)
    suppression: bool = True

    def validate(self) -> None:
        if self.n_experts < 1:
            raise ContractError("MoLoRAConfig.n_experts must be >= 1")
        if self.rank < 1:
            raise ContractError("MoLoRAConfig.rank must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ContractError("MoLoRAConfig.delta must lie in [0, 1]")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def _prefix(cid: ComponentId) -> str:
    return f"adapters.{cid.param_name}"


def router_param_names(cid: ComponentId) -> list[str]:
    return [f"{_prefix(cid)}.router"]


def expert_param_names(cid: ComponentId, n_experts: int) -> list[str]:
    return [f"{_prefix(cid)}.expert{i}.{m}" for i in range(n_experts) for m in ("A", "B")]


def lora_param_names(cid: ComponentId) -> list[str]:
    return [f"{_prefix(cid)}.lora.A", f"{_prefix(cid)}.lora.B"]


class Router:
    def __init__(self, weight: Parameter):
        self.weight = weight

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[0]


def router_gate(router: Router, x) -> np.ndarray | Tensor:
    """softmax(W x) over ``N+1`` outputs; entry 0 is the suppression probability."""
    if isinstance(x, Tensor):
        return nx.softmax(nx.linear(x, router.weight), axis=-1)
    logits = router.weight.data @ np.asarray(x, dtype=router.weight.dtype)
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass
class LoRAExpert:
    A: Parameter  # (r, d_in)
    B: Parameter  # (d_out, r)

    @property
    def rank(self) -> int:
        return self.A.shape[0]


def _gaussian(rng, shape, dtype, std):
    return (rng.standard_normal(shape) * std).astype(dtype)


class MoLoRAAdapter:
    kind = "molora"

    def __init__(self, cid: ComponentId, d_in: int, d_out: int, config: MoLoRAConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.cid = cid
        self.config = config
        self.d_in, self.d_out = d_in, d_out
        rng = nx.rng_for(seed, "adapter", *cid.key)
        r = config.rank
        self.experts = []
        for i, (a_name, b_name) in enumerate(zip(*[iter(expert_param_names(cid, config.n_experts))] * 2)):
            a = Parameter(a_name, _gaussian(rng, (r, d_in), dtype, 1.0 / math.sqrt(d_in)))
            b = Parameter(b_name, np.zeros((d_out, r), dtype=dtype))
            self.experts.append(LoRAExpert(a, b))
        n_out = config.n_experts + (1 if config.suppression else 0)
        self.router = Router(Parameter(router_param_names(cid)[0], _gaussian(rng, (n_out, d_in), dtype, 0.02)))

    @property
    def has_suppression(self) -> bool:
        return self.config.suppression

    def parameters(self) -> list[Parameter]:
        out = [self.router.weight]
        for e in self.experts:
            out += [e.A, e.B]
        return out

    def router_parameters(self) -> list[Parameter]:
        return [self.router.weight]

    def expert_parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in (e.A, e.B)]

    def apply(self, x: Tensor, base: Tensor) -> tuple[Tensor, Tensor]:
        """Base output plus gate-weighted expert updates; returns (output, gate)."""
        n, r = self.config.n_experts, self.config.rank
        gate = router_gate(self.router, x)
        expert_w = gate[..., 1:] if self.config.suppression else gate
        a_cat = nx.concat([e.A for e in self.experts], axis=0)
        b_cat = nx.concat([e.B for e in self.experts], axis=1)
        lead = x.shape[:-1]
        xa = nx.linear(x, a_cat).reshape(*lead, n, r)
        weighted = (xa * expert_w.reshape(*lead, n, 1)).reshape(*lead, n * r)
        delta = nx.linear(weighted, b_cat) * self.config.scale
        return base + delta, gate

    def clone(self) -> "MoLoRAAdapter":
        out = MoLoRAAdapter.__new__(MoLoRAAdapter)
        out.cid, out.config, out.d_in, out.d_out = self.cid, self.config, self.d_in, self.d_out
        out.experts = [
            LoRAExpert(
                Parameter(e.A.name, e.A.data.copy(), e.A.trainable),
                Parameter(e.B.name, e.B.data.copy(), e.B.trainable),
            )
            for e in self.experts
        ]
        w = self.router.weight
        out.router = Router(Parameter(w.name, w.data.copy(), w.trainable))
        return out

    def describe(self) -> dict:
        return {"component": str(self.cid), "kind": self.kind, "d_in": self.d_in, "d_out": self.d_out, **asdict(self.config)}


class LoRAAdapter:
    """Single low-rank update without a router."""

    kind = "lora"

    def __init__(self, cid: ComponentId, d_in: int, d_out: int, rank: int, alpha: float, seed: int = 0, dtype=np.float32):
        if rank < 1:
            raise ContractError("LoRA rank must be >= 1")
        self.cid = cid
        self.rank, self.alpha = rank, alpha
        self.d_in, self.d_out = d_in, d_out
        rng = nx.rng_for(seed, "adapter", *cid.key)
        a_name, b_name = lora_param_names(cid)
        self.expert = LoRAExpert(
            Parameter(a_name, _gaussian(rng, (rank, d_in), dtype, 1.0 / math.sqrt(d_in))),
            Parameter(b_name, np.zeros((d_out, rank), dtype=dtype)),
        )

    has_suppression = False

    def parameters(self) -> list[Parameter]:
        return [self.expert.A, self.expert.B]

    def router_parameters(self) -> list[Parameter]:
        return []

    def expert_parameters(self) -> list[Parameter]:
        return self.parameters()

    def apply(self, x: Tensor, base: Tensor) -> tuple[Tensor, None]:
        delta = nx.linear(nx.linear(x, self.expert.A), self.expert.B) * (self.alpha / self.rank)
        return base + delta, None

    def clone(self) -> "LoRAAdapter":
        out = LoRAAdapter.__new__(LoRAAdapter)
        out.cid, out.rank, out.alpha, out.d_in, out.d_out = self.cid, self.rank, self.alpha, self.d_in, self.d_out
        a, b = self.expert.A, self.expert.B
        out.expert = LoRAExpert(Parameter(a.name, a.data.copy(), a.trainable), Parameter(b.name, b.data.copy(), b.trainable))
        return out

    def describe(self) -> dict:
        return {
            "component": str(self.cid),
            "kind": self.kind,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "rank": self.rank,
            "alpha": self.alpha,
        }


def adapter_from_description(desc: Mapping, model: Model):
    cid = ComponentId.parse(desc["component"])
    if desc["kind"] == "lora":
        return LoRAAdapter(cid, desc["d_in"], desc["d_out"], desc["rank"], desc["alpha"], dtype=model.dtype)
    fields = {k: desc[k] for k in ("n_experts", "rank", "alpha", "delta", "suppression")}
    return MoLoRAAdapter(cid, desc["d_in"], desc["d_out"], MoLoRAConfig(**fields), dtype=model.dtype)


def _attach(model: Model, ids: Iterable[ComponentId], make) -> Model:
    ids = sorted(set(ids))
    for cid in ids:
        if cid not in model.registry:
            raise ContractError(f"attach_adapters: unknown component {cid}")
        if cid in model.adapters:
            raise ContractError(f"attach_adapters: {cid} already has an adapter")
    for cid in ids:
        d_out, d_in = model.registry.param(cid).shape
        model.adapters[cid] = make(cid, d_in, d_out)
    return model


def attach_adapters(model: Model, ids: Iterable[ComponentId], config: MoLoRAConfig = MoLoRAConfig(), seed: int = 0) -> Model:
    """Wrap each listed component in a zero-initialised MoLoRA adapter (in place)."""
    config.validate()
    return _attach(model, ids, lambda cid, d_in, d_out: MoLoRAAdapter(cid, d_in, d_out, config, seed, model.dtype))


def attach_lora(model: Model, ids: Iterable[ComponentId], rank: int, alpha: float, seed: int = 0) -> Model:
    return _attach(model, ids, lambda cid, d_in, d_out: LoRAAdapter(cid, d_in, d_out, rank, alpha, seed, model.dtype))


def detach_adapters(model: Model) -> Model:
    model.adapters = {}
    return model


def adapter_parameter_count(n_components: int, d_in: int, d_out: int, config: MoLoRAConfig) -> int:
    """Closed form for same-shaped components: N*r*(d_in+d_out) + (N+1)*d_in each."""
    n_out = config.n_experts + (1 if config.suppression else 0)
    return n_components * (config.n_experts * config.rank * (d_in + d_out) + n_out * d_in)


# ---------------------------------------------------------------------------
# routing loss
# ---------------------------------------------------------------------------


def importance_weight_matrix(tool_flags, n_experts: int, delta: float) -> np.ndarray:
    """Rows ``[1+d, 1-d, ...]`` for tool tokens and ``[1-d, 1+d, ...]`` otherwise."""
    if not 0.0 <= delta <= 1.0:
        raise ContractError(f"importance_weight_matrix: delta={delta} outside [0, 1]")
    flags = np.asarray(tool_flags, dtype=bool).reshape(-1)
    tool_row = np.array([1.0 + delta] + [1.0 - delta] * n_experts)
    other_row = np.array([1.0 - delta] + [1.0 + delta] * n_experts)
    return np.where(flags[:, None], tool_row, other_row)


def routing_loss(gates, weights) -> Tensor:
    """Population variance over mean of ``Z = weights * gates`` (all entries)."""
    g = gates if isinstance(gates, Tensor) else Tensor(np.asarray(gates, dtype=np.float64))
    w = np.asarray(weights, dtype=g.dtype)
    if g.shape != w.shape:
        raise ContractError(f"routing_loss: gate shape {g.shape} != importance shape {w.shape}")
    z = g * w
    mu = z.mean()
    if float(mu.data) <= 1e-12:
        raise ContractError("routing_loss: mean of Z must be positive")
    # shifting by a constant entry first leaves the variance and its gradient
    # unchanged but makes equal entries give exactly zero
    shifted = z - float(z.data.reshape(-1)[0])
    centered = shifted - shifted.mean()
    return (centered * centered).mean() / mu


@dataclass
class RoutingBatchStats:
    gates: np.ndarray  # (tokens, N+1)
    tool_flags: np.ndarray  # (tokens,)
    z: np.ndarray
    loss: float


def adapter_routing_losses(gates: Mapping[ComponentId, Tensor], valid: np.ndarray, tool_flags: np.ndarray, delta: float, model: Model) -> list[Tensor]:
    """Per-adapter routing loss over the valid tokens of a batch.

    ``valid`` is a (B, T) boolean mask of real tokens; ``tool_flags`` gives the
    per-token tool flag with the same shape. Only suppression routers contribute.
    """
    rows = np.flatnonzero(valid.reshape(-1))
    flags = tool_flags.reshape(-1)[rows]
    losses = []
    for cid in sorted(gates):
        adapter = model.adapters[cid]
        if not adapter.has_suppression:
            continue
        g = gates[cid]
        flat = g.reshape(-1, g.shape[-1])[rows]
        weights = importance_weight_matrix(flags, adapter.config.n_experts, delta)
        losses.append(routing_loss(flat, weights))
    return losses
