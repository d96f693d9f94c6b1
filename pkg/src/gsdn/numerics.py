"""Dense kernels, neural-net primitives and a small reverse-mode tape.

Values are plain numpy arrays. Anything that needs a gradient goes through
a :class:`Var` created on a :class:`Tape`; every primitive below accepts
either a ``Var`` or a raw array and only records itself on the tape when at
least one input is a ``Var``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "parents", "backward", "name")

    def __init__(self, value, tape=None, parents=(), backward=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{self.value.shape})"


class Tape:
    """Ordered record of primitive applications.

    ``watch`` registers a leaf (a parameter); ``gradient`` replays the
    record in reverse.  Call ``reset`` between optimizer steps.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: set[int] = set()

    def watch(self, value, name=None) -> Var:
        v = Var(value, self, name=name)
        self.leaves.add(id(v))
        self.nodes.append(v)
        return v

    def record(self, value, parents, backward) -> Var:
        v = Var(value, self, parents, backward)
        self.nodes.append(v)
        return v

    def reset(self):
        self.nodes.clear()
        self.leaves.clear()

    def gradient(self, loss: Var, params):
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        for p in params:
            if id(p) not in self.leaves:
                raise TapeError(f"parameter {p!r} is not registered on this tape")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if not isinstance(parent, Var) or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def grad_of(loss: Var, params):
    """Gradients of a scalar taped loss with respect to watched params."""
    if not isinstance(loss, Var) or loss.tape is None:
        raise TapeError("loss is not taped")
    return loss.tape.gradient(loss, params)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _emit(value, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return tape.record(value, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- kernels

def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch {av.shape} x {bv.shape}")
    out = av @ bv
    return _emit(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(adj, h):
    """Sparse (scipy CSR) times dense; only the dense side is differentiable."""
    hv = _val(h)
    if adj.shape[1] != hv.shape[0]:
        raise DimensionError(f"spmm shape mismatch {adj.shape} x {hv.shape}")
    out = np.asarray(adj @ hv)
    adj_t = adj.T.tocsr()
    return _emit(out, (h,), lambda g: (np.asarray(adj_t @ g),))


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    return _emit(_val(a) * c, (a,), lambda g: (g * c,))


def rsub_scalar(c: float, a):
    """c - a"""
    return _emit(c - _val(a), (a,), lambda g: (-g,))


def total(a):
    av = _val(a)
    return _emit(np.asarray(av.sum()), (a,), lambda g: (np.full_like(av, g),))


def mean(a):
    av = _val(a)
    n = av.size
    return _emit(np.asarray(av.sum() / n), (a,), lambda g: (np.full_like(av, g / n),))


def gather_rows(a, idx):
    av = _val(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = av[idx]

    def back(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit(out, (a,), back)


def column_slice(a, lo, hi):
    """a[lo:hi] of a 1-D vector, returned as a column."""
    av = _val(a)

    def back(g):
        ga = np.zeros_like(av)
        ga[lo:hi] = g[:, 0]
        return (ga,)

    return _emit(av[lo:hi].reshape(-1, 1), (a,), back)


def concat_cols(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[0] != bv.shape[0]:
        raise DimensionError("concat row mismatch")
    k = av.shape[1]
    return _emit(np.concatenate([av, bv], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]))


def relu(x):
    xv = _val(x)
    mask = xv > 0
    return _emit(xv * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    xv = _val(x)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def row_softmax(x):
    xv = _val(x)
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (x,), back)


def sq_l2(u, v):
    """Row-wise squared euclidean distance; 1-D inputs give a scalar."""
    uv, vv = _val(u), _val(v)
    if uv.shape != vv.shape:
        raise DimensionError(f"sq_l2 length mismatch {uv.shape} vs {vv.shape}")
    d = uv - vv
    out = (d * d).sum(axis=-1)

    def back(g):
        gd = 2.0 * d * np.expand_dims(g, -1)
        return gd, -gd

    return _emit(out, (u, v), back)


def log_softmax_rows(xv):
    m = xv.max(axis=-1, keepdims=True)
    return xv - m - np.log(np.exp(xv - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """-log softmax(logits)[label] for a single row (plain numbers)."""
    lv = np.asarray(_val(logits), dtype=np.float64)
    if not 0 <= label < lv.shape[-1]:
        raise ValueError(f"label {label} out of range for {lv.shape[-1]} classes")
    return float(-log_softmax_rows(lv)[label])


def softmax_ce(logits, labels):
    """Fused softmax + cross-entropy, summed over rows."""
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or lv.shape[0] != labels.shape[0]:
        raise DimensionError("softmax_ce shape mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ValueError("label out of range")
    logp = log_softmax_rows(lv)
    rows = np.arange(lv.shape[0])
    out = np.asarray(-logp[rows, labels].sum())

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * g,)

    return _emit(out, (logits,), back)


@dataclass
class BNState:
    """Learned scale/shift plus running statistics for one layer."""
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, width, dtype=np.float32):
        return cls(np.ones(width, dtype), np.zeros(width, dtype),
                   np.zeros(width, dtype), np.ones(width, dtype))


def batchnorm(x, state: BNState, mode="train", scale=None, shift=None):
    """Per-column batch normalisation.

    ``scale``/``shift`` default to the state's arrays; pass taped Vars to get
    their gradients.  Train mode updates the running statistics in place
    (unbiased variance, as torch does).
    """
    xv = _val(x)
    scale = state.scale if scale is None else scale
    shift = state.shift if shift is None else shift
    gv, bv = _val(scale), _val(shift)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean) * inv
        out = xhat * gv + bv
        return _emit(out, (x, scale, shift),
                     lambda g: (g * gv * inv, (g * xhat).sum(0), g.sum(0)))
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    n = xv.shape[0]
    if n < 2:
        raise DegenerateBatchError("batchnorm in train mode needs at least 2 rows")
    mu = xv.mean(axis=0)
    xc = xv - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gv + bv
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mu
    state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))

    def back(g):
        gxhat = g * gv
        gx = inv / n * (n * gxhat - gxhat.sum(0) - xhat * (gxhat * xhat).sum(0))
        return gx, (g * xhat).sum(0), g.sum(0)

    return _emit(out, (x, scale, shift), back)


def dropout(x, p: float, mode="train", rng=None):
    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    xv = _val(x)
    keep = (rng.random(xv.shape) >= p).astype(xv.dtype) / (1.0 - p)
    return _emit(xv * keep, (x,), lambda g: (g * keep,))


def assert_finite(a, what="array"):
    v = _val(a)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite entries in {what}")
    return a
