"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor that requires a gradient, are recorded on that tape in execution order.
Because recording happens in execution order the tape is already a
topological order, so :meth:`Tape.backward` simply walks it in reverse.

Outside of a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import threading
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericFault, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "_rg", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._rg = requires_grad
        self._tape: Tape | None = None

    @property
    def requires_grad(self) -> bool:
        return self._rg

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor owned by a model. Gradients flow only when trainable."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.trainable = trainable

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    @property
    def tensor(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ``backward`` may be called any number of times and
    gradients accumulate into ``Parameter.grad`` until cleared.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("backward: loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # this call's leaf gradients are summed first and added once, so that
        # repeated calls accumulate exactly
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(inputs, fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._tape is None:
                    prev = leaves.get(key)
                    leaves[key] = (inp, np.array(ig, dtype=inp.dtype, copy=True) if prev is None else prev[1] + ig)
                else:
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
        for leaf, g in leaves.values():
            if leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad += g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Fill ``grad`` on every trainable leaf reachable from ``loss``."""
    tape = tape if tape is not None else loss._tape
    if tape is None:
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        raise ContractError("backward: loss is not on any tape")
    tape.backward(loss)


def evaluate(graph_fn: Callable[..., Tensor], *inputs, tape: Tape | None = None) -> Tensor:
    """Run ``graph_fn(*inputs)`` with recording onto ``tape`` (a fresh one if omitted).

    The returned tensor remembers its tape, so ``backward(out)`` works either way.
    """
    tape = tape if tape is not None else Tape()
    with tape:
        return graph_fn(*inputs)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericFault(name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._rg = False
    out._tape = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out._rg = True
        tape._record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _emit("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit("log", out, (a,), lambda g: (g / ad,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad**p
    return _emit("power", out, (a,), lambda g: (g * p * ad ** (p - 1),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    out = x * sig
    return _emit("silu", out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for ``x`` of shape (..., d_in) and ``w`` of shape (d_out, d_in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _emit("linear", xd @ wd.T, (x, w), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, tuple(axes))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("getitem", a.shape, np.shape(idx)) from None
    shape, dtype = a.shape, a.dtype

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", np.array(out, copy=True), (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _emit("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


# ---------------------------------------------------------------------------
# fused neural-network primitives
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        try:
            x = np.where(mask, x, -np.inf)
        except ValueError:
            raise ShapeError("softmax", a.shape, np.shape(mask)) from None
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis followed by a gain."""
    if weight.shape != (x.shape[-1],):
        raise ShapeError("rms_norm", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    n = xd.shape[-1]

    def bw(g):
        gn = g * wd
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / n)
        gw = (g * normed).reshape(-1, n).sum(axis=0) if weight.requires_grad else None
        return gx, gw

    return _emit("rms_norm", normed * wd, (x, weight), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, (int(ids.max()),))
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", weight.data[ids], (weight,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum over positions of ``-log softmax(logits)[target]``.

    ``weights`` (same shape as ``targets``) masks or rescales positions; the
    caller divides by a token count to obtain a mean.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    e = np.exp(shifted)
    s = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(s)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones(targets.shape, dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    if w.shape != targets.shape:
        raise ShapeError("cross_entropy", targets.shape, w.shape)
    loss = np.asarray(-(picked * w).sum(), dtype=x.dtype)

    def bw(g):
        p = e / s
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w * g)[..., None],)

    return _emit("cross_entropy", loss, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking, optimization, randomness
# ---------------------------------------------------------------------------


def finite_diff_check(
    expr: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    coords_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``expr`` is a zero-argument callable building a scalar from ``params``.
    Up to ``coords_per_param`` coordinates are sampled from each parameter.
    """
    params = list(params)
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"finite_diff_check: {p.name} is {p.dtype}, need float64")
    first, second = float(expr().data), float(expr().data)
    if first != second:
        raise ContractError("finite_diff_check: expression is not deterministic")

    saved = [(p, p.trainable, p.grad) for p in params]
    for p in params:
        p.trainable, p.grad = True, None
    try:
        tape = Tape()
        with tape:
            out = expr()
        if out._tape is tape:
            tape.backward(out)
        analytic = {id(p): (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}
    finally:
        for p, trainable, grad in saved:
            p.trainable, p.grad = trainable, grad

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
        ga = analytic[id(p)].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(expr().data)
            flat[i] = orig - eps
            down = float(expr().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(ga[i])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


class Adam:
    """Adam with bias correction; only trainable parameters holding a gradient move."""

    def __init__(self, params: Iterable[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ContractError("Adam: learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericFault(p.name, "non-finite gradient")
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.lr == 0:
                continue
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def rng_for(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent generator for one purpose (init, sampling, truncation, ...) of a run."""
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode()), *map(int, extra)])
