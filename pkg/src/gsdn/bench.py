"""Reference GCN, neighbourhood-fetch counting and the latency harness."""
from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .graph import GraphDataset
from .model import glorot, predict_logits
from .numerics import ConfigError, DimensionError


def normalized_adjacency(ds: GraphDataset, dtype=np.float32):
    """D^-1/2 (A + I) D^-1/2 as CSR, degrees counted with the self-loop."""
    n = ds.num_nodes
    e = ds.edges
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    inv = 1.0 / np.sqrt(deg)
    vals = inv[rows] * inv[cols]
    adj = sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj


# ---------------------------------------------------------------- GCN

@dataclass
class GCNParams:
    d: int
    F: int
    L: int
    C: int
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return GCNParams(self.d, self.F, self.L, self.C,
                         {k: v.copy() for k, v in self.tensors.items()})


def init_gcn(d, F, L, C, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    p = GCNParams(d, F, L, C)
    fan_in = d
    for l in range(L):
        p.tensors[f"W{l}"] = glorot(rng, fan_in, F, dtype)
        p.tensors[f"b{l}"] = np.zeros(F, dtype)
        fan_in = F
    p.tensors["cls_W"] = glorot(rng, F, C, dtype)
    p.tensors["cls_b"] = np.zeros(C, dtype)
    return p


def gcn_embed(params: GCNParams, adj, x, mode="eval", rng=None, dropout=0.0, P=None):
    P = params.tensors if P is None else P
    xv = x.value if isinstance(x, nx.Var) else x
    if xv.shape[1] != params.d or adj.shape[0] != xv.shape[0]:
        raise DimensionError(f"gcn shape mismatch: adj {adj.shape}, x {xv.shape}")
    h = x
    for l in range(params.L):
        h = nx.dropout(h, dropout, mode, rng)
        h = nx.add(nx.spmm(adj, nx.matmul(h, P[f"W{l}"])), P[f"b{l}"])
        if l < params.L - 1:
            h = nx.relu(h)
    return h


def gcn_forward(params: GCNParams, adj, x, mode="eval", rng=None, dropout=0.0, P=None):
    """L propagation layers (ReLU between, none after the last) + linear classifier."""
    P = params.tensors if P is None else P
    h = gcn_embed(params, adj, x, mode, rng, dropout, P)
    return nx.add(nx.matmul(h, P["cls_W"]), P["cls_b"])


def gcn_predict(params, adj, x):
    return np.argmax(gcn_forward(params, adj, x), axis=1)


def save_gcn(params: GCNParams, path, config_hash="", extra=None):
    meta = {"kind": "gcn", "d": params.d, "F": params.F, "L": params.L, "C": params.C,
            "config_hash": config_hash, **(extra or {})}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)),
                 **{f"t_{k}": v for k, v in params.tensors.items()})


def load_gcn(path, expect=None):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("kind") != "gcn":
            raise ValueError(f"not a GCN checkpoint: kind={meta.get('kind')}")
        for k, v in (expect or {}).items():
            if meta[k] != v:
                raise DimensionError(f"checkpoint {k}={meta[k]} but expected {v}")
        p = GCNParams(meta["d"], meta["F"], meta["L"], meta["C"],
                      {key[2:]: z[key].copy() for key in z.files if key.startswith("t_")})
    return p, meta


def checkpoint_kind(path):
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["__meta__"])).get("kind")


# ---------------------------------------------------------------- fetches

@dataclass
class FetchTrace:
    target: int
    L: int
    per_layer: list   # cumulative unique nodes within l hops, l = 0..L
    total: int


def count_fetches(ds, target, L, model="gcn"):
    """Unique nodes whose features an L-layer model must read to infer ``target``."""
    if L < 0:
        raise ValueError("L must be >= 0")
    if model == "gsdn":
        # the MLP reads only the target row at any depth
        if not 0 <= target:
            raise ValueError(f"invalid node id {target}")
        return FetchTrace(int(target), L, [1] * (L + 1), 1)
    n = ds.num_nodes
    if not 0 <= target < n:
        raise ValueError(f"invalid node id {target}")
    seen = {int(target)}
    frontier = [int(target)]
    counts = [1]
    for _ in range(L):
        nxt = []
        for u in frontier:
            for v in ds.neighbors(u):
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
        counts.append(len(seen))
    return FetchTrace(int(target), L, counts, len(seen))


def khop_nodes(ds, targets, L):
    seen = set(int(t) for t in targets)
    frontier = list(seen)
    for _ in range(L):
        nxt = []
        for u in frontier:
            for v in ds.neighbors(u):
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return np.array(sorted(seen), dtype=np.int64)


# ---------------------------------------------------------------- latency

def thread_count():
    return int(os.environ.get("GSDN_THREADS", "1"))


@contextmanager
def pinned_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


@dataclass
class LatencyStats:
    model: str
    median_ms: float
    iqr_ms: float
    reps: int
    threads: int
    samples_ms: list = field(repr=False, default_factory=list)


def time_fn(fn, reps=30, warmup=3, inner=1):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        out.append((time.perf_counter_ns() - t0) / 1e6 / inner)
    return out


def _summarize(model, samples, threads):
    q = np.percentile(samples, [25, 50, 75])
    return LatencyStats(model, float(q[1]), float(q[2] - q[0]), len(samples), threads, samples)


def bench_latency(kind, params, dataset, targets=None, reps=30, warmup=3, inner=1, threads=None):
    """Wall-clock inference latency in ms.

    ``targets=None`` times full-graph inference.  With targets, the GCN path
    first fetches the L-hop ball around them (that BFS is part of the
    measured time) while the GSDN path reads only the target rows.
    """
    if reps < 5:
        raise ConfigError("reps must be >= 5")
    threads = thread_count() if threads is None else threads
    if kind == "gsdn":
        x_all = dataset.features
        x = np.asarray(x_all if targets is None else x_all[np.asarray(targets)],
                       dtype=params.tensors["W0"].dtype)
        fn = lambda: predict_logits(params, x)  # noqa: E731
    elif kind == "gcn":
        dtype = params.tensors["W0"].dtype
        if targets is None:
            adj = normalized_adjacency(dataset, dtype)
            x = np.asarray(dataset.features, dtype=dtype)
            fn = lambda: gcn_forward(params, adj, x)  # noqa: E731
        else:
            adj_full = normalized_adjacency(dataset, dtype)
            feats = np.asarray(dataset.features, dtype=dtype)
            tg = np.asarray(targets)

            def fn():
                ball = khop_nodes(dataset, tg, params.L)
                sub = adj_full[ball][:, ball]
                out = gcn_forward(params, sub, feats[ball])
                return out[np.searchsorted(ball, tg)]
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    with pinned_threads(threads):
        samples = time_fn(fn, reps, warmup, inner)
    return _summarize(kind, samples, threads)


def linear_fit_r2(xs, ys):
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    A = np.stack([xs, np.ones_like(xs)], 1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    return 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0, float((resid ** 2).sum())


def exp_fit_residual(xs, ys):
    """Residual sum of squares of y = c * r**x (fit in log space)."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    A = np.stack([xs, np.ones_like(xs)], 1)
    coef, *_ = np.linalg.lstsq(A, np.log(ys), rcond=None)
    pred = np.exp(A @ coef)
    return float(((ys - pred) ** 2).sum())
