"""Tiny pre-norm decoder-only transformer with addressable linear components."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Parameter, Tensor

SLOTS = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_gate", "ffn_down")
SITES = ("attn_input", "ffn_input")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 53
    max_seq_len: int = 128
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"ModelConfig: d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass(frozen=True)
class ComponentId:
    layer: int
    slot: str

    def __post_init__(self):
        if self.slot not in SLOTS:
            raise ContractError(f"unknown component slot {self.slot!r}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer, SLOTS.index(self.slot))

    def __lt__(self, other: "ComponentId") -> bool:
        return self.key < other.key

    def __str__(self) -> str:
        return f"layer{self.layer}/{self.slot}"

    @property
    def param_name(self) -> str:
        return f"layers.{self.layer}.{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        head, _, slot = text.partition("/")
        if not head.startswith("layer") or not slot:
            raise ContractError(f"malformed component id {text!r}")
        return cls(int(head[5:]), slot)


@dataclass(frozen=True)
class ProbeSite:
    layer: int
    site: str

    def __post_init__(self):
        if self.site not in SITES:
            raise ContractError(f"unknown probe site {self.site!r}")


def all_probe_sites(n_layers: int, site: str) -> list[ProbeSite]:
    return [ProbeSite(layer, site) for layer in range(n_layers)]


class ComponentRegistry:
    """Ordered binding of every attention/FFN projection to its parameter."""

    def __init__(self, bindings: Sequence[tuple[ComponentId, Parameter]]):
        self._items = list(bindings)
        self._index = {cid: p for cid, p in self._items}

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __contains__(self, cid) -> bool:
        return cid in self._index

    def ids(self) -> list[ComponentId]:
        return [cid for cid, _ in self._items]

    def param(self, cid: ComponentId) -> Parameter:
        try:
            return self._index[cid]
        except KeyError:
            raise ContractError(f"unknown component {cid}") from None

    def trainable(self, cid: ComponentId) -> bool:
        return self.param(cid).trainable

    def set_trainable(self, cid: ComponentId, flag: bool) -> None:
        self.param(cid).trainable = flag


@dataclass
class ForwardOutput:
    logits: Tensor
    captures: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.adapters: dict = {}
        self.registry = ComponentRegistry(
            [
                (ComponentId(layer, slot), params[f"layers.{layer}.{slot}"])
                for layer in range(config.n_layers)
                for slot in SLOTS
            ]
        )
        self._mask_cache: dict[int, np.ndarray] = {}

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def backbone_parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def adapter_parameters(self) -> list[Parameter]:
        return [p for cid in sorted(self.adapters) for p in self.adapters[cid].parameters()]

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.adapter_parameters()

    def clone(self) -> "Model":
        params = {
            name: Parameter(name, p.data.copy(), trainable=p.trainable) for name, p in self.params.items()
        }
        out = Model(self.config, params)
        out.adapters = {cid: ad.clone() for cid, ad in self.adapters.items()}
        return out

    def _causal(self, t: int) -> np.ndarray:
        mask = self._mask_cache.get(t)
        if mask is None:
            mask = self._mask_cache[t] = np.tril(np.ones((t, t), dtype=bool))
        return mask

    def _project(self, cid: ComponentId, x: Tensor, out: ForwardOutput) -> Tensor:
        y = nx.linear(x, self.registry.param(cid))
        adapter = self.adapters.get(cid)
        if adapter is not None:
            y, gate = adapter.apply(x, y)
            if gate is not None:
                out.gates[cid] = gate
        return y

    def forward_batch(
        self,
        ids: np.ndarray,
        lengths: np.ndarray | None = None,
        probes: Iterable[ProbeSite] | None = None,
    ) -> ForwardOutput:
        """Run a right-padded batch ``ids`` of shape (B, T).

        Captures hold the last real token's state (``lengths - 1``) at each
        requested probe site, as arrays of shape (B, d_model).
        """
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ContractError(f"forward: expected (batch, time) ids, got shape {ids.shape}")
        bsz, t = ids.shape
        if t > cfg.max_seq_len:
            raise ContractError(f"forward: length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ContractError("forward: token id outside vocabulary")
        if lengths is None:
            lengths = np.full(bsz, t)
        wanted = set(probes or ())
        last = (np.arange(bsz), np.asarray(lengths) - 1)
        out = ForwardOutput(logits=None)
        p = self.params
        h, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        mask = self._causal(t)
        scale = 1.0 / math.sqrt(hd)

        x = nx.embedding(p["tok_emb"], ids) + p["pos_emb"][:t]
        for layer in range(cfg.n_layers):
            a_in = nx.rms_norm(x, p[f"layers.{layer}.attn_norm"])
            site = ProbeSite(layer, "attn_input")
            if site in wanted:
                out.captures[site] = a_in.data[last].copy()
            q = self._project(ComponentId(layer, "attn_q"), a_in, out)
            k = self._project(ComponentId(layer, "attn_k"), a_in, out)
            v = self._project(ComponentId(layer, "attn_v"), a_in, out)
            q = q.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
            k = k.reshape(bsz, t, h, hd).transpose(0, 2, 3, 1)
            v = v.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
            att = nx.softmax((q @ k) * scale, axis=-1, mask=mask)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
            x = x + self._project(ComponentId(layer, "attn_o"), ctx, out)

            f_in = nx.rms_norm(x, p[f"layers.{layer}.ffn_norm"])
            site = ProbeSite(layer, "ffn_input")
            if site in wanted:
                out.captures[site] = f_in.data[last].copy()
            gate = nx.silu(self._project(ComponentId(layer, "ffn_gate"), f_in, out))
            up = self._project(ComponentId(layer, "ffn_up"), f_in, out)
            x = x + self._project(ComponentId(layer, "ffn_down"), gate * up, out)

        x = nx.rms_norm(x, p["final_norm"])
        out.logits = nx.linear(x, p["head"])
        return out


def build_model(config: ModelConfig, dtype=nx.DEFAULT_DTYPE) -> Model:
    config.validate()
    rng = nx.rng_for(config.seed, "init")
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    resid_scale = 1.0 / math.sqrt(2 * config.n_layers)

    def gauss(name, shape, std):
        return Parameter(name, (rng.standard_normal(shape) * std).astype(dtype))

    params: dict[str, Parameter] = {}
    params["tok_emb"] = gauss("tok_emb", (v, d), 0.3)
    params["pos_emb"] = gauss("pos_emb", (config.max_seq_len, d), 0.1)
    shapes = {
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_o": (d, d),
        "ffn_up": (f, d),
        "ffn_gate": (f, d),
        "ffn_down": (d, f),
    }
    for layer in range(config.n_layers):
        params[f"layers.{layer}.attn_norm"] = Parameter(f"layers.{layer}.attn_norm", np.ones(d, dtype=dtype))
        params[f"layers.{layer}.ffn_norm"] = Parameter(f"layers.{layer}.ffn_norm", np.ones(d, dtype=dtype))
        for slot in SLOTS:
            shape = shapes[slot]
            std = 1.0 / math.sqrt(shape[1])
            if slot in ("attn_o", "ffn_down"):
                std *= resid_scale
            name = f"layers.{layer}.{slot}"
            params[name] = gauss(name, shape, std)
    params["final_norm"] = Parameter("final_norm", np.ones(d, dtype=dtype))
    params["head"] = gauss("head", (v, d), 1.0 / math.sqrt(d))
    return Model(config, params)


def _check_tokens(model: Model, tokens: Sequence[int]) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError("expected a non-empty 1-D token sequence")
    if arr.size > model.config.max_seq_len:
        raise ContractError(f"sequence length {arr.size} exceeds max_seq_len {model.config.max_seq_len}")
    return arr


def forward(model: Model, tokens: Sequence[int], probes: Iterable[ProbeSite] | None = None):
    """Logits for every position of one sequence and last-token captures."""
    arr = _check_tokens(model, tokens)
    out = model.forward_batch(arr[None, :], probes=probes)
    return out.logits.data[0], {site: vec[0] for site, vec in out.captures.items()}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) model inputs
    labels: np.ndarray  # (B, T) next-token targets
    weights: np.ndarray  # (B, T) 1 on target positions
    lengths: np.ndarray  # (B,) real input length
    n_tokens: int


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_len: int | None = None) -> Batch:
    """Pack (prompt, target) pairs for teacher-forced next-token loss."""
    if not pairs:
        raise ContractError("make_batch: no examples")
    seqs = []
    for prompt, target in pairs:
        if len(target) == 0:
            raise ContractError("sequence_nll: empty target")
        if len(prompt) == 0:
            raise ContractError("sequence_nll: empty prompt")
        seqs.append((list(prompt) + list(target), len(prompt)))
    t = max(len(s) for s, _ in seqs) - 1
    if max_len is not None and t > max_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len {max_len}")
    bsz = len(seqs)
    ids = np.zeros((bsz, t), dtype=np.int64)
    labels = np.zeros((bsz, t), dtype=np.int64)
    weights = np.zeros((bsz, t))
    lengths = np.zeros(bsz, dtype=np.int64)
    for i, (seq, plen) in enumerate(seqs):
        n = len(seq) - 1
        ids[i, :n] = seq[:-1]
        labels[i, :n] = seq[1:]
        weights[i, plen - 1 : n] = 1.0
        lengths[i] = n
    return Batch(ids, labels, weights, lengths, int(weights.sum()))


def batch_nll(model: Model, batch: Batch, out: ForwardOutput | None = None, denominator: float | None = None) -> Tensor:
    """Summed target-token NLL divided by ``denominator`` (default: token count)."""
    if out is None:
        out = model.forward_batch(batch.ids, batch.lengths)
    total = nx.cross_entropy(out.logits, batch.labels, batch.weights.astype(model.dtype))
    return total * (1.0 / (denominator if denominator is not None else batch.n_tokens))


def sequence_nll(model: Model, prompt: Sequence[int], target: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``target`` given ``prompt``."""
    if len(target) == 0:
        raise ContractError("sequence_nll: empty target")
    return batch_nll(model, make_batch([(prompt, target)], model.config.max_seq_len))


def mean_nll(model: Model, pairs, batch_size: int = 128) -> float:
    """Token-mean NLL over many pairs without recording gradients."""
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        b = make_batch(pairs[start : start + batch_size], model.config.max_seq_len)
        total += float(batch_nll(model, b, denominator=1.0).data)
        count += b.n_tokens
    return total / count


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def greedy_decode(model: Model, prompt: Sequence[int], max_new: int, stop_token: int) -> list[int]:
    if max_new < 1:
        raise ContractError("greedy_decode: max_new must be >= 1")
    return greedy_decode_batch(model, [prompt], max_new, stop_token)[0]


def greedy_decode_batch(
    model: Model, prompts: Sequence[Sequence[int]], max_new: int, stop_token: int
) -> list[list[int]]:
    """Argmax decoding; prompts of equal length are decoded together.

    Continuations exclude the stop token and stop early at ``max_seq_len``.
    """
    results: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    limit = model.config.max_seq_len
    for plen in sorted(groups):
        idx = groups[plen]
        cur = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        gen: list[list[int]] = [[] for _ in idx]
        for _ in range(max_new):
            if cur.shape[1] > limit:
                break
            logits = model.forward_batch(cur).logits.data[:, -1]
            nxt = logits.argmax(axis=-1)
            for j, tok in enumerate(nxt):
                if done[j]:
                    continue
                if tok == stop_token:
                    done[j] = True
                else:
                    gen[j].append(int(tok))
            if done.all():
                break
            cur = np.concatenate([cur, nxt[:, None]], axis=1)
        for j, i in enumerate(idx):
            results[i] = gen[j]
    return results


# ---------------------------------------------------------------------------
# component surgery
# ---------------------------------------------------------------------------


def swap_component_weights(target: Model, source: Model, ids: Iterable[ComponentId]) -> Model:
    """Copy of ``target`` whose listed components carry ``source``'s weights."""
    if asdict(target.config) != asdict(source.config):
        raise ContractError("swap_component_weights: model configs differ")
    ids = list(ids)
    for cid in ids:
        if cid not in target.registry:
            raise ContractError(f"swap_component_weights: unknown component {cid}")
    out = target.clone()
    for cid in ids:
        out.registry.param(cid).data[...] = source.registry.param(cid).data
    return out


def set_trainable(model: Model, names: Iterable[str] | None) -> None:
    """Mark exactly ``names`` trainable (``None`` freezes everything)."""
    keep = set(names or ())
    for p in model.parameters():
        p.trainable = p.name in keep


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Directory with ``manifest.json`` and one little-endian ``weights.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.dtype).newbyteorder("<")
    entries, offset, chunks = [], 0, []
    for p in model.parameters():
        raw = np.ascontiguousarray(p.data, dtype=dtype).tobytes()
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "dtype": dtype.name,
        "parameters": entries,
        "adapters": [model.adapters[cid].describe() for cid in sorted(model.adapters)],
    }
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContractError(f"checkpoint not found: {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format_version')}")
    config = ModelConfig(**manifest["config"])
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    blob = (path / "weights.bin").read_bytes()
    arrays = {
        e["name"]: np.frombuffer(blob, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        .reshape(e["shape"])
        .astype(dtype.newbyteorder("="))
        for e in manifest["parameters"]
    }
    model = build_model(config, dtype=dtype.newbyteorder("="))
    for name, p in model.params.items():
        p.data = arrays[name].copy()
    if manifest["adapters"]:
        from .molora import adapter_from_description

        for desc in manifest["adapters"]:
            adapter = adapter_from_description(desc, model)
            for p in adapter.parameters():
                p.data = arrays[p.name].copy()
            model.adapters[adapter.cid] = adapter
    return model


def parameter_bytes(model: Model) -> dict[str, bytes]:
    return {p.name: p.data.tobytes() for p in model.parameters()}
