"""MLP backbone with two linear heads and a learnable mixup coefficient."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import BNState, DimensionError


@dataclass
class ModelParams:
    """All learnable tensors, keyed by name, plus per-layer BN state.

    Weight matrices are stored input-major (``h @ W``), so a head is F x C.
    BN scale/shift arrays are shared between ``tensors`` and ``bn``.
    """
    d: int
    F: int
    L: int
    C: int
    tensors: dict = field(default_factory=dict)
    bn: list = field(default_factory=list)

    def names(self):
        return list(self.tensors)

    def copy(self):
        out = ModelParams(self.d, self.F, self.L, self.C)
        out.bn = [copy.deepcopy(s) for s in self.bn]
        for k, v in self.tensors.items():
            out.tensors[k] = v.copy()
        for l, s in enumerate(out.bn):
            out.tensors[f"bn_scale{l}"] = s.scale
            out.tensors[f"bn_shift{l}"] = s.shift
        return out

    def astype(self, dtype):
        out = self.copy()
        for s in out.bn:
            s.scale = s.scale.astype(dtype)
            s.shift = s.shift.astype(dtype)
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        for k in list(out.tensors):
            out.tensors[k] = out.tensors[k].astype(dtype)
        for l, s in enumerate(out.bn):
            out.tensors[f"bn_scale{l}"] = s.scale
            out.tensors[f"bn_shift{l}"] = s.shift
        return out


def glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(d, F, L, C, seed, dtype=np.float32):
    if min(d, F, L, C) < 1:
        raise ValueError("d, F, L, C must all be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_backbone, s_f, s_g, s_m = (np.random.default_rng(s) for s in root.spawn(4))
    p = ModelParams(d, F, L, C)
    fan_in = d
    for l in range(L):
        p.tensors[f"W{l}"] = glorot(s_backbone, fan_in, F, dtype)
        fan_in = F
    for l in range(L):
        st = BNState.fresh(F, dtype)
        p.bn.append(st)
        p.tensors[f"bn_scale{l}"] = st.scale
        p.tensors[f"bn_shift{l}"] = st.shift
    p.tensors["f_W"] = glorot(s_f, F, C, dtype)
    p.tensors["f_b"] = np.zeros(C, dtype)
    p.tensors["g_W"] = glorot(s_g, F, C, dtype)
    p.tensors["g_b"] = np.zeros(C, dtype)
    p.tensors["m_W"] = glorot(s_m, d, F, dtype)
    p.tensors["a"] = np.zeros(2 * F, dtype)
    return p


@dataclass
class ForwardCache:
    activations: list


def backbone_forward(params: ModelParams, x, mode="eval", rng=None, dropout=0.0, P=None):
    """L x Dropout(BN(ReLU(H W))).  ``P`` optionally maps names to taped Vars."""
    P = params.tensors if P is None else P
    xv = x.value if isinstance(x, nx.Var) else x
    if xv.ndim != 2 or xv.shape[1] != params.d:
        raise DimensionError(f"expected {params.d} input columns, got {xv.shape}")
    h = x
    acts = [h]
    for l in range(params.L):
        h = nx.matmul(h, P[f"W{l}"])
        h = nx.relu(h)
        h = nx.batchnorm(h, params.bn[l], mode, P[f"bn_scale{l}"], P[f"bn_shift{l}"])
        h = nx.dropout(h, dropout, mode, rng)
        acts.append(h)
    return h, ForwardCache(acts)


def _head(P, prefix, h, F):
    hv = h.value if isinstance(h, nx.Var) else h
    if hv.shape[-1] != F:
        raise DimensionError(f"head expects {F} columns, got {hv.shape[-1]}")
    return nx.add(nx.matmul(h, P[f"{prefix}_W"]), P[f"{prefix}_b"])


def head_f(params, h, P=None):
    return _head(params.tensors if P is None else P, "f", h, params.F)


def head_g(params, h, P=None):
    return _head(params.tensors if P is None else P, "g", h, params.F)


def mixup_scores(params, x, P=None):
    """Per-row halves of the attention logit: (x W_m) a[:F] and (x W_m) a[F:]."""
    P = params.tensors if P is None else P
    proj = nx.matmul(x, P["m_W"])
    F = params.F
    return (nx.matmul(proj, nx.column_slice(P["a"], 0, F)),
            nx.matmul(proj, nx.column_slice(P["a"], F, 2 * F)))


def mixup_coeff(params, x_i, x_j, P=None):
    """beta = sigmoid(a . [x_i W_m || x_j W_m]) for row-aligned x_i, x_j."""
    x_i = np.atleast_2d(x_i)
    x_j = np.atleast_2d(x_j)
    left, _ = mixup_scores(params, x_i, P)
    _, right = mixup_scores(params, x_j, P)
    return nx.sigmoid(nx.add(left, right))


def mixup_embed(params, h_i, h_j, beta, P=None):
    """head_g(beta * h_j + (1 - beta) * h_i); beta weights the neighbour."""
    mixed = nx.add(h_i, nx.mul(beta, nx.sub(h_j, h_i)))
    return head_g(params, mixed, P)


def predict_logits(params, x):
    h, _ = backbone_forward(params, x, mode="eval")
    return head_f(params, h)


def predict(params, x):
    return np.argmax(predict_logits(params, x), axis=1)


def embed(params, x):
    h, _ = backbone_forward(params, x, mode="eval")
    return h


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path, config_hash="", extra=None):
    meta = {"kind": "gsdn", "d": params.d, "F": params.F, "L": params.L, "C": params.C,
            "config_hash": config_hash, **(extra or {})}
    arrays = {f"t_{k}": v for k, v in params.tensors.items()}
    for l, s in enumerate(params.bn):
        arrays[f"bn_mean{l}"] = s.running_mean
        arrays[f"bn_var{l}"] = s.running_var
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, expect=None):
    """Load params; ``expect`` is an optional dict of required d/F/L/C."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("kind") != "gsdn":
            raise ValueError(f"not a GSDN checkpoint: kind={meta.get('kind')}")
        for k, v in (expect or {}).items():
            if meta[k] != v:
                raise DimensionError(f"checkpoint {k}={meta[k]} but expected {v}")
        p = ModelParams(meta["d"], meta["F"], meta["L"], meta["C"])
        for key in z.files:
            if key.startswith("t_"):
                p.tensors[key[2:]] = z[key].copy()
        for l in range(p.L):
            st = BNState(p.tensors[f"bn_scale{l}"], p.tensors[f"bn_shift{l}"],
                         z[f"bn_mean{l}"].copy(), z[f"bn_var{l}"].copy())
            p.bn.append(st)
    _check_shapes(p)
    return p, meta


def _check_shapes(p: ModelParams):
    want = {"f_W": (p.F, p.C), "g_W": (p.F, p.C), "f_b": (p.C,), "g_b": (p.C,),
            "m_W": (p.d, p.F), "a": (2 * p.F,)}
    for l in range(p.L):
        want[f"W{l}"] = (p.d if l == 0 else p.F, p.F)
    for k, shape in want.items():
        if p.tensors[k].shape != shape:
            raise DimensionError(f"{k} has shape {p.tensors[k].shape}, expected {shape}")
