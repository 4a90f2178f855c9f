"""Symbolic vocabulary and deterministic synthetic tasks.

Four general-ability proxies (ARITH, COPY, REVERSE, RECALL) are learned during
pretraining; TOOLCALL is the tool-learning task injected by fine-tuning.
Every prompt is ``<bos> <task> content <sep>`` and every target ends in ``<eos>``.
"""

from __future__ import annotations

import enum
import json
import re
import string
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

PAD, BOS, EOS, CALL, SEP = "<pad>", "<bos>", "<eos>", "CALL", "<sep>"
SPECIALS = (PAD, BOS, EOS, CALL, SEP)
OPERATORS = tuple("+-=,():")


class TaskKind(str, enum.Enum):
    TOOLCALL = "TOOLCALL"
    ARITH = "ARITH"
    COPY = "COPY"
    REVERSE = "REVERSE"
    RECALL = "RECALL"

    @property
    def marker(self) -> str:
        return f"<{self.value.lower()}>"


GENERAL_TASKS = (TaskKind.ARITH, TaskKind.COPY, TaskKind.REVERSE, TaskKind.RECALL)
ROLE_MARKERS = tuple(kind.marker for kind in TaskKind)


class Vocabulary:
    """Fixed bijective symbol <-> id map with ``<pad>`` at id 0."""

    def __init__(self):
        self.symbols: tuple[str, ...] = (
            SPECIALS + ROLE_MARKERS + tuple(string.digits) + tuple(string.ascii_lowercase) + OPERATORS
        )
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self._pattern = re.compile(r"CALL|<[a-z]+>|\S")

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, symbol: str) -> int:
        return self.index[symbol]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def call(self) -> int:
        return self.index[CALL]

    @property
    def sep(self) -> int:
        return self.index[SEP]

    def encode(self, text: str) -> list[int]:
        out = []
        for sym in self._pattern.findall(text):
            if sym not in self.index:
                raise ContractError(f"symbol {sym!r} not in vocabulary")
            out.append(self.index[sym])
        return out

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        parts = []
        for i in ids:
            sym = self.symbols[int(i)]
            if skip_special and (sym in ROLE_MARKERS or sym in (PAD, BOS, EOS, SEP)):
                continue
            parts.append("CALL " if sym == CALL else sym)
        return "".join(parts)


VOCAB = Vocabulary()


# ---------------------------------------------------------------------------
# tool catalog and call grammar
# ---------------------------------------------------------------------------

_VALUE_CHARS = string.ascii_lowercase + string.digits


@dataclass(frozen=True)
class ApiSpec:
    name: str
    args: tuple[tuple[str, str], ...]  # (arg name, value alphabet)


@dataclass(frozen=True)
class ToolCatalog:
    apis: tuple[ApiSpec, ...]

    def __post_init__(self):
        names = [a.name for a in self.apis]
        if len(set(names)) != len(names):
            raise ContractError("ToolCatalog: api names must be unique")
        if len(self.apis) < 8:
            raise ContractError("ToolCatalog: need at least 8 apis")
        for api in self.apis:
            if not 1 <= len(api.args) <= 3:
                raise ContractError(f"ToolCatalog: {api.name} must take 1..3 args")

    def get(self, name: str) -> ApiSpec | None:
        for api in self.apis:
            if api.name == name:
                return api
        return None


def default_catalog(n_apis: int = 10, seed: int = 7, alphabet_size: int = 36) -> ToolCatalog:
    rng = np.random.default_rng(seed)
    apis, seen = [], set()
    while len(apis) < n_apis:
        name = "".join(rng.choice(list(string.ascii_lowercase), size=int(rng.integers(2, 4))))
        if name in seen:
            continue
        seen.add(name)
        n_args = int(rng.integers(1, 4))
        arg_names = rng.choice(list(string.ascii_lowercase), size=n_args, replace=False)
        args = tuple(
            (str(a), "".join(sorted(rng.choice(list(_VALUE_CHARS), size=alphabet_size, replace=False)))) for a in arg_names
        )
        apis.append(ApiSpec(name, args))
    return ToolCatalog(tuple(apis))


CATALOG = default_catalog()


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: tuple[tuple[str, str], ...]
    trailing: tuple[int, ...] = ()


@dataclass(frozen=True)
class ParseFailure:
    reason: str  # NO_CALL_TOKEN | NAME_MALFORMED | ARGS_MALFORMED
    detail: str = ""


def render_tool_call(call: ToolCall) -> list[int]:
    body = ",".join(f"{k}={v}" for k, v in call.args)
    return [VOCAB.call] + VOCAB.encode(f"{call.name}({body})") + list(call.trailing)


def parse_tool_call(text: str | Sequence[int]) -> ToolCall | ParseFailure:
    """Parse ``CALL name(a=v,...)``; tokens after ``)`` are kept as ``trailing``."""
    ids = VOCAB.encode(text) if isinstance(text, str) else [int(t) for t in text]
    syms = [VOCAB.symbols[i] for i in ids]
    if not syms or syms[0] != CALL:
        return ParseFailure("NO_CALL_TOKEN", "output does not start with CALL")
    pos = 1
    name = ""
    while pos < len(syms) and syms[pos] in string.ascii_lowercase:
        name += syms[pos]
        pos += 1
    if not name or pos >= len(syms) or syms[pos] != "(":
        return ParseFailure("NAME_MALFORMED", f"bad api name at token {pos}")
    pos += 1
    args = []
    while True:
        key = ""
        while pos < len(syms) and syms[pos] in string.ascii_lowercase:
            key += syms[pos]
            pos += 1
        if not key or pos >= len(syms) or syms[pos] != "=":
            return ParseFailure("ARGS_MALFORMED", f"bad argument name at token {pos}")
        pos += 1
        value = ""
        while pos < len(syms) and syms[pos] in _VALUE_CHARS:
            value += syms[pos]
            pos += 1
        if not value or pos >= len(syms):
            return ParseFailure("ARGS_MALFORMED", f"bad argument value at token {pos}")
        args.append((key, value))
        if syms[pos] == ",":
            pos += 1
            continue
        if syms[pos] == ")":
            pos += 1
            break
        return ParseFailure("ARGS_MALFORMED", f"unexpected {syms[pos]!r} at token {pos}")
    return ToolCall(name, tuple(args), tuple(ids[pos:]))


# ---------------------------------------------------------------------------
# examples and generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticExample:
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    task: TaskKind
    is_tool: bool

    def __post_init__(self):
        if self.is_tool != (self.task is TaskKind.TOOLCALL):
            raise ContractError("SyntheticExample: is_tool must equal task == TOOLCALL")
        if not self.target or self.target[-1] != VOCAB.eos:
            raise ContractError("SyntheticExample: target must end with <eos>")

    @property
    def prompt_text(self) -> str:
        return VOCAB.decode(self.prompt, skip_special=True)

    @property
    def target_text(self) -> str:
        return VOCAB.decode(self.target, skip_special=True)

    def pair(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.prompt, self.target


@dataclass(frozen=True)
class TaskConfig:
    arith_max: int = 29
    string_min: int = 3
    string_max: int = 8
    string_alphabet: str = string.digits + string.ascii_lowercase
    recall_keys: int = 64
    recall_seed: int = 1234
    # symbols per tool-call argument value; longer values need far more fine-tuning
    tool_value_len: int = 1


DEFAULT_TASKS = TaskConfig()

# RECALL key splits: "eval" keys are held out of every fine-tuning corpus
RECALL_SPLITS = ("all", "eval", "rehearsal")


def recall_table(config: TaskConfig = DEFAULT_TASKS) -> list[tuple[str, str]]:
    """Fixed key -> value facts; independent of any dataset seed."""
    rng = np.random.default_rng(config.recall_seed)
    letters = list(string.ascii_lowercase)
    keys: list[str] = []
    while len(keys) < config.recall_keys:
        k = "".join(rng.choice(letters, size=3))
        if k not in keys:
            keys.append(k)
    values = ["".join(rng.choice(list(string.digits), size=2)) + str(rng.choice(letters)) for _ in keys]
    return list(zip(keys, values))


def recall_keys(split: str, config: TaskConfig = DEFAULT_TASKS) -> list[tuple[str, str]]:
    table = recall_table(config)
    half = len(table) // 2
    if split == "all":
        return table
    if split == "eval":
        return table[:half]
    if split == "rehearsal":
        return table[half:]
    raise ContractError(f"unknown recall split {split!r}")


TOOL_SPLITS = ("all", "train", "test")


def tool_split_of(name: str, values: Sequence[str]) -> str:
    """Fixed assignment of a call to the train (3/4) or test (1/4) share."""
    return "test" if zlib.crc32(f"{name}|{','.join(values)}".encode()) % 4 == 0 else "train"


def tool_prompt_content(api: ApiSpec, values: Sequence[str]) -> str:
    return f"{api.name}({''.join(k for k, _ in api.args)}):{','.join(values)}"


def _wrap(task: TaskKind, content: str, answer: str | list[int]) -> SyntheticExample:
    prompt = [VOCAB.bos, VOCAB[task.marker]] + VOCAB.encode(content) + [VOCAB.sep]
    target = (answer if isinstance(answer, list) else VOCAB.encode(answer)) + [VOCAB.eos]
    return SyntheticExample(tuple(prompt), tuple(target), task, task is TaskKind.TOOLCALL)


def _seed_for(task: TaskKind, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(task.value.encode())])


def generate_dataset(
    task: TaskKind | str,
    n: int,
    seed: int,
    config: TaskConfig = DEFAULT_TASKS,
    catalog: ToolCatalog = CATALOG,
    recall_split: str = "all",
    tool_split: str = "all",
) -> list[SyntheticExample]:
    """``n`` examples of ``task``; a pure function of its arguments.

    ``tool_split`` restricts TOOLCALL examples to the "train" or "test" share of
    (api, values) combinations, so held-out calls are never seen in fine-tuning.
    """
    task = TaskKind(task)
    if n < 1:
        raise ContractError("generate_dataset: n must be >= 1")
    if tool_split not in TOOL_SPLITS:
        raise ContractError(f"unknown tool split {tool_split!r}")
    rng = _seed_for(task, seed)
    alphabet = list(config.string_alphabet)
    out = []
    if task is TaskKind.RECALL:
        facts = recall_keys(recall_split, config)
    for _ in range(n):
        if task is TaskKind.ARITH:
            a, b = (int(v) for v in rng.integers(0, config.arith_max + 1, size=2))
            out.append(_wrap(task, f"{a}+{b}=", str(a + b)))
        elif task in (TaskKind.COPY, TaskKind.REVERSE):
            length = int(rng.integers(config.string_min, config.string_max + 1))
            s = "".join(rng.choice(alphabet, size=length))
            out.append(_wrap(task, s, s if task is TaskKind.COPY else s[::-1]))
        elif task is TaskKind.RECALL:
            key, value = facts[int(rng.integers(len(facts)))]
            out.append(_wrap(task, key, value))
        else:
            while True:
                api = catalog.apis[int(rng.integers(len(catalog.apis)))]
                values = [
                    "".join(rng.choice(list(alpha), size=config.tool_value_len)) for _, alpha in api.args
                ]
                if tool_split == "all" or tool_split_of(api.name, values) == tool_split:
                    break
            call = ToolCall(api.name, tuple((k, v) for (k, _), v in zip(api.args, values)))
            content = tool_prompt_content(api, values)
            out.append(_wrap(task, content, render_tool_call(call)))
    return out


def make_probe_input(example: SyntheticExample, seed: int) -> list[int]:
    """Prompt followed by a random proper prefix of the gold target."""
    if not example.target:
        raise ContractError("make_probe_input: empty target")
    k = int(np.random.default_rng([int(seed), 3]).integers(0, len(example.target)))
    return list(example.prompt) + list(example.target[:k])


def sample_probe_inputs(dataset: Sequence[SyntheticExample], m: int, seed: int) -> list[list[int]]:
    """``m`` probe inputs from distinct examples (sampling without replacement)."""
    if m > len(dataset):
        raise ContractError(f"sample_probe_inputs: asked for {m} of {len(dataset)} examples")
    rng = np.random.default_rng([int(seed), 4])
    picks = rng.choice(len(dataset), size=m, replace=False)
    return [make_probe_input(dataset[int(i)], seed * 100003 + int(i)) for i in picks]


def _largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    raw = [w * total for w in weights]
    counts = [int(np.floor(r)) for r in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def mix_datasets(
    tool: Sequence[SyntheticExample],
    general: Mapping[TaskKind, Sequence[SyntheticExample]],
    ratios: Mapping[TaskKind, float] | None = None,
    n_total: int | None = None,
    seed: int = 0,
) -> list[SyntheticExample]:
    """Interleave the tool set with general sets in the given proportions.

    Without ``ratios`` every input example is used once. Kind counts follow
    largest-remainder rounding of ``ratios * n_total``; each kind contributes a
    prefix of its dataset, and the result is shuffled deterministically.
    """
    pools: dict[TaskKind, Sequence[SyntheticExample]] = {TaskKind.TOOLCALL: tool}
    pools.update({TaskKind(k): v for k, v in general.items()})
    if ratios is None:
        ratios = {k: float(len(v)) for k, v in pools.items()}
    ratios = {TaskKind(k): float(v) for k, v in ratios.items()}
    for kind, r in ratios.items():
        if r < 0:
            raise ContractError(f"mix_datasets: negative ratio for {kind.value}")
        if r > 0 and not pools.get(kind):
            raise ContractError(f"mix_datasets: empty dataset for {kind.value} with positive ratio")
    kinds = [k for k in pools if ratios.get(k, 0.0) > 0]
    if not kinds:
        raise ContractError("mix_datasets: all ratios are zero")
    norm = sum(ratios[k] for k in kinds)
    if n_total is None:
        n_total = sum(len(pools[k]) for k in kinds)
    counts = _largest_remainder([ratios[k] / norm for k in kinds], n_total)
    mixed: list[SyntheticExample] = []
    for kind, count in zip(kinds, counts):
        if count > len(pools[kind]):
            raise ContractError(f"mix_datasets: {kind.value} needs {count} examples, has {len(pools[kind])}")
        mixed.extend(pools[kind][:count])
    order = np.random.default_rng([int(seed), 5]).permutation(len(mixed))
    return [mixed[int(i)] for i in order]


# ---------------------------------------------------------------------------
# JSON-lines interchange
# ---------------------------------------------------------------------------


def example_to_record(ex: SyntheticExample) -> str:
    return json.dumps(
        {"prompt": list(ex.prompt), "target": list(ex.target), "task": ex.task.value, "is_tool": ex.is_tool},
        sort_keys=True,
        separators=(",", ":"),
    )


def export_dataset(examples: Iterable[SyntheticExample], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(example_to_record(ex) + "\n" for ex in examples))
    return path


def import_dataset(path: str | Path) -> list[SyntheticExample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(SyntheticExample(tuple(rec["prompt"]), tuple(rec["target"]), TaskKind(rec["task"]), rec["is_tool"]))
    return out


@dataclass
class TaskSuite:
    """Train/test splits for every task, derived from one seed."""

    pretrain: dict[TaskKind, list[SyntheticExample]] = field(default_factory=dict)
    finetune: dict[TaskKind, list[SyntheticExample]] = field(default_factory=dict)
    test: dict[TaskKind, list[SyntheticExample]] = field(default_factory=dict)


def build_suite(
    seed: int,
    pretrain_per_task: int = 20000,
    tool_train: int = 4000,
    general_train: int = 1000,
    test_per_task: int = 200,
    config: TaskConfig = DEFAULT_TASKS,
) -> TaskSuite:
    suite = TaskSuite()
    for i, kind in enumerate(GENERAL_TASKS):
        suite.pretrain[kind] = generate_dataset(kind, pretrain_per_task, seed * 10 + 1, config)
        split = "rehearsal" if kind is TaskKind.RECALL else "all"
        suite.finetune[kind] = generate_dataset(kind, general_train, seed * 10 + 2, config, recall_split=split)
        split = "eval" if kind is TaskKind.RECALL else "all"
        suite.test[kind] = generate_dataset(kind, test_per_task, seed * 10 + 3, config, recall_split=split)
    tool = TaskKind.TOOLCALL
    suite.finetune[tool] = generate_dataset(tool, tool_train, seed * 10 + 2, config, tool_split="train")
    suite.test[tool] = generate_dataset(tool, test_per_task, seed * 10 + 3, config, tool_split="test")
    return suite


def max_target_len(examples: Iterable[SyntheticExample]) -> int:
    return max(len(ex.target) for ex in examples)
