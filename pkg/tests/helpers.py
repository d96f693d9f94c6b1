"""Shared test oracles and fixtures."""
import numpy as np

from gsdn import numerics as nx
from gsdn.graph import GraphDataset, SplitMask


def fd_check(loss_fn, inputs, h=1e-5):
    """Max relative error between taped gradients and central differences.

    ``loss_fn(*args)`` must return a scalar (Var when any arg is a Var).
    Relative error uses max(|a|, |b|, 1) as the denominator so unit-scale
    inputs with tiny gradients do not blow up the ratio.
    """
    tape = nx.Tape()
    vars_ = [tape.watch(np.array(x, dtype=np.float64)) for x in inputs]
    loss = loss_fn(*vars_)
    grads = nx.grad_of(loss, vars_)
    worst = 0.0
    for k, x in enumerate(inputs):
        x = np.array(x, dtype=np.float64)
        for idx in np.ndindex(x.shape):
            plus = [np.array(v, dtype=np.float64) for v in inputs]
            minus = [np.array(v, dtype=np.float64) for v in inputs]
            plus[k][idx] += h
            minus[k][idx] -= h
            fp = float(np.asarray(_value(loss_fn(*plus))))
            fm = float(np.asarray(_value(loss_fn(*minus))))
            num = (fp - fm) / (2 * h)
            ana = float(grads[k][idx])
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1.0))
    return worst


def _value(v):
    return v.value if isinstance(v, nx.Var) else v


def toy_graph(n=5, seed=0, d=4, C=3, edges=None):
    rng = np.random.default_rng(seed)
    if edges is None:
        edges = [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)][: max(n, 1)]
        edges = [e for e in edges if max(e) < n]
    x = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return GraphDataset(x, edges, y, C)


def random_graph(n, p, seed, d=4, C=3):
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    x = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return GraphDataset(x, edges, y, C)


def split_of(train, val=(), test=()):
    return SplitMask(np.array(train), np.array(val), np.array(test))


def oracle_outputs(p, x):
    """Eval-mode embeddings and head logits, written without library kernels."""
    h = np.asarray(x, dtype=np.float64)
    for l in range(p.L):
        h = np.maximum(h @ p.tensors[f"W{l}"], 0)
        bn = p.bn[l]
        h = (h - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) * bn.scale + bn.shift
    y = h @ p.tensors["f_W"] + p.tensors["f_b"]
    z = h @ p.tensors["g_W"] + p.tensors["g_b"]
    return h, y, z


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def oracle_feat_full(p, ds):
    """Double loop over nodes and node pairs."""
    x = np.asarray(ds.features, dtype=np.float64)
    h, y, _ = oracle_outputs(p, x)
    n = ds.num_nodes
    adj = {i: set() for i in range(n)}
    for i, j in ds.edges:
        adj[int(i)].add(int(j))
        adj[int(j)].add(int(i))
    F = p.F
    a = p.tensors["a"]
    Wm = p.tensors["m_W"]
    total_, count = 0.0, 0
    for i in range(n):
        if not adj[i]:
            continue
        pos = 0.0
        for j in adj[i]:
            beta = _sigmoid(float(np.dot(a[:F], x[i] @ Wm) + np.dot(a[F:], x[j] @ Wm)))
            mixed = beta * h[j] + (1 - beta) * h[i]
            zp = mixed @ p.tensors["g_W"] + p.tensors["g_b"]
            pos += float(np.sum((y[i] - zp) ** 2))
        pos /= len(adj[i])
        neg, m = 0.0, 0
        for k in range(n):
            if k == i or k in adj[i]:
                continue
            zk = h[k] @ p.tensors["g_W"] + p.tensors["g_b"]
            neg += float(np.sum((_softmax(y[i]) - _softmax(zk)) ** 2))
            m += 1
        total_ += pos - (neg / m if m else 0.0)
        count += 1
    return total_ / count


def oracle_label_full(p, ds, train):
    x = np.asarray(ds.features, dtype=np.float64)
    _, y, z = oracle_outputs(p, x)
    out = 0.0
    for i in train:
        s = ds.labels[i]
        out += -np.log(_softmax(y[i])[s])
        for j in range(ds.num_nodes):
            if j != i and ds.has_edge(np.array([i]), np.array([j]))[0]:
                out += -np.log(_softmax(z[j])[s])
    return float(out)


def randomized_params(d, F, L, C, seed):
    from gsdn.model import init_params
    rng = np.random.default_rng(seed + 1000)
    p = init_params(d, F, L, C, seed=seed, dtype=np.float64)
    p.tensors["a"][:] = rng.normal(size=2 * F)
    for k in ("f_b", "g_b"):
        p.tensors[k][:] = rng.normal(size=C) * 0.3
    for bn in p.bn:
        bn.running_mean[:] = rng.normal(size=F) * 0.2
        bn.running_var[:] = rng.uniform(0.5, 1.5, size=F)
        bn.scale[:] = rng.uniform(0.5, 1.5, size=F)
        bn.shift[:] = rng.normal(size=F) * 0.2
    return p
