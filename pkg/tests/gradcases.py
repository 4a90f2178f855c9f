"""Scalar expressions exercising each differentiable primitive, for gradient checks."""

import numpy as np

from citilab import numerics as nx
from citilab.numerics import Parameter


def _p(name, shape, rng, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Parameter(name, data, dtype=np.float64)


def primitive_cases(seed: int = 0):
    """name -> (expression, params). Each expression reduces to a scalar through a
    fixed random projection so every output coordinate carries gradient."""
    rng = np.random.default_rng(seed)
    a, b = _p("a", (3, 4), rng), _p("b", (3, 4), rng)
    row = _p("row", (4,), rng)
    pos = _p("pos", (3, 4), rng, positive=True)
    m1, m2 = _p("m1", (2, 3, 4), rng), _p("m2", (4, 5), rng)
    w = _p("w", (5, 4), rng)
    emb = _p("emb", (6, 4), rng)
    gain = _p("gain", (4,), rng)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    targets = np.array([[1, 0, 2], [4, 4, 3]])
    tw = np.array([[1.0, 0.0, 2.0], [1.0, 1.0, 0.5]])
    logits = _p("logits", (2, 3, 5), rng)
    mask = np.tril(np.ones((3, 4), dtype=bool), 1)
    proj = {}

    def project(t):
        key = t.shape
        if key not in proj:
            proj[key] = np.random.default_rng(len(proj) + 11).standard_normal(key)
        return nx.tsum(nx.mul(t, proj[key]))

    return {
        "add": (lambda: project(nx.add(a, row)), [a, row]),
        "sub": (lambda: project(nx.sub(a, b)), [a, b]),
        "mul": (lambda: project(nx.mul(a, b)), [a, b]),
        "div": (lambda: project(nx.div(a, pos)), [a, pos]),
        "neg": (lambda: project(nx.neg(a)), [a]),
        "exp": (lambda: project(nx.exp(a)), [a]),
        "log": (lambda: project(nx.log(pos)), [pos]),
        "power": (lambda: project(nx.power(pos, 3.0)), [pos]),
        "silu": (lambda: project(nx.silu(a)), [a]),
        "matmul": (lambda: project(nx.matmul(m1, m2)), [m1, m2]),
        "linear": (lambda: project(nx.linear(m1, w)), [m1, w]),
        "reshape": (lambda: project(nx.reshape(a, (2, 6))), [a]),
        "transpose": (lambda: project(nx.transpose(m1, (2, 0, 1))), [m1]),
        "getitem": (lambda: project(nx.getitem(a, (np.array([0, 2, 2]), slice(1, 3)))), [a]),
        "concat": (lambda: project(nx.concat([a, b], axis=1)), [a, b]),
        "sum": (lambda: project(nx.tsum(m1, axis=1)), [m1]),
        "mean": (lambda: project(nx.mean(m1, axis=-1, keepdims=True)), [m1]),
        "softmax": (lambda: project(nx.softmax(a, axis=-1, mask=mask)), [a]),
        "log_softmax": (lambda: project(nx.log_softmax(a, axis=0)), [a]),
        "rms_norm": (lambda: project(nx.rms_norm(m1, gain)), [m1, gain]),
        "embedding": (lambda: project(nx.embedding(emb, ids)), [emb]),
        "cross_entropy": (lambda: nx.cross_entropy(logits, targets, tw), [logits]),
    }
