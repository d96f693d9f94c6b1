"""Graph datasets: on-disk format, planted-partition generation, splits,
label noise and negative sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitMask:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def validate(self, num_nodes):
        if len(self.train) == 0:
            raise DatasetError("train split is empty")
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        for name, s, arr in zip(("train", "val", "test"), sets, (self.train, self.val, self.test)):
            if len(s) != len(arr):
                raise DatasetError(f"duplicate node ids in {name} split")
            if s and (min(s) < 0 or max(s) >= num_nodes):
                raise DatasetError(f"{name} split has node ids outside [0, {num_nodes})")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DatasetError("splits overlap")

    def to_json(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}


def _canonical_edges(edges):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.sort(e, axis=1)
    if len(e):
        e = e[np.lexsort((e[:, 1], e[:, 0]))]
    return e


class GraphDataset:
    """Immutable attributed undirected graph.

    ``edges`` holds canonical (i < j) pairs, sorted.  Neighbour lists are CSR
    (``indptr``/``indices``) with both directions of every edge.
    """

    def __init__(self, features, edges, labels, num_classes):
        features = np.asarray(features)
        labels = np.asarray(labels, dtype=np.int64)
        n = features.shape[0]
        e = _canonical_edges(edges)
        if len(e):
            if np.any(e[:, 0] == e[:, 1]):
                raise DatasetError("self-loop edge")
            if e.min() < 0 or e.max() >= n:
                raise DatasetError("edge endpoint out of range")
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise DatasetError("duplicate edge")
        if labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got {labels.shape[0]}")
        if n and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"label outside [0, {num_classes})")
        self._features = features
        self._edges = e
        self._labels = labels
        self.num_classes = int(num_classes)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        self._indices = dst[order]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))]).astype(np.int64)
        self._keys = np.sort(src * n + dst)
        for a in (self._features, self._edges, self._labels, self._indices, self._indptr):
            a.setflags(write=False)

    @property
    def num_nodes(self):
        return self._features.shape[0]

    @property
    def num_features(self):
        return self._features.shape[1]

    @property
    def num_edges(self):
        return len(self._edges)

    @property
    def features(self):
        return self._features

    @property
    def labels(self):
        return self._labels

    @property
    def edges(self):
        return self._edges

    @property
    def indptr(self):
        return self._indptr

    @property
    def indices(self):
        return self._indices

    def has_edge(self, a, b):
        """Vectorised adjacency test for pairs (a[t], b[t])."""
        n = self.num_nodes
        keys = np.asarray(a, dtype=np.int64) * n + np.asarray(b, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        if len(self._keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        return self._keys[pos] == keys

    def neighbors(self, i):
        return self._indices[self._indptr[i]:self._indptr[i + 1]]

    def degrees(self):
        return np.diff(self._indptr)

    def with_labels(self, labels):
        return GraphDataset(self._features, self._edges, labels, self.num_classes)

    def with_edges(self, edges):
        return GraphDataset(self._features, edges, self._labels, self.num_classes)

    def homophily(self):
        if self.num_edges == 0:
            return float("nan")
        e = self._edges
        return float(np.mean(self._labels[e[:, 0]] == self._labels[e[:, 1]]))


class CountingDataset:
    """Read-through wrapper counting structure accesses (edges/adjacency)."""

    _STRUCTURE = {"edges", "indptr", "indices", "neighbors", "has_edge", "degrees", "homophily", "with_edges"}

    def __init__(self, inner: GraphDataset):
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "adjacency_reads", 0)
        object.__setattr__(self, "feature_reads", 0)

    def __getattr__(self, name):
        if name in CountingDataset._STRUCTURE:
            object.__setattr__(self, "adjacency_reads", self.adjacency_reads + 1)
        elif name == "features":
            object.__setattr__(self, "feature_reads", self.feature_reads + 1)
        return getattr(self._inner, name)


# ---------------------------------------------------------------- disk format

def _fmt(x):
    return repr(float(x))


def save_dataset(ds: GraphDataset, split: SplitMask, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"num_nodes": ds.num_nodes, "num_features": ds.num_features,
                "num_classes": ds.num_classes}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(path / "features.csv", "w") as f:
        for row in np.asarray(ds.features, dtype=np.float64):
            f.write(",".join(_fmt(v) for v in row) + "\n")
    with open(path / "edges.csv", "w") as f:
        for i, j in ds.edges:
            f.write(f"{i},{j}\n")
    with open(path / "labels.csv", "w") as f:
        for y in ds.labels:
            f.write(f"{y}\n")
    (path / "splits.json").write_text(json.dumps(split.to_json()) + "\n")


def _read_lines(p):
    with open(p) as f:
        return [ln.strip() for ln in f if ln.strip()]


def load_dataset(path):
    path = Path(path)
    for name in ("manifest.json", "features.csv", "edges.csv", "labels.csv", "splits.json"):
        if not (path / name).is_file():
            raise DatasetError(f"missing file {path / name}")
    manifest = json.loads((path / "manifest.json").read_text())
    n, d, c = manifest["num_nodes"], manifest["num_features"], manifest["num_classes"]

    rows = _read_lines(path / "features.csv")
    if len(rows) != n:
        raise DatasetError(f"features.csv has {len(rows)} rows, manifest says {n}")
    features = np.array([[float(v) for v in r.split(",")] for r in rows]) if n else np.zeros((0, d))
    if features.shape[1:] != (d,):
        raise DatasetError(f"features.csv has {features.shape[1]} columns, manifest says {d}")

    edges, seen = [], set()
    for lineno, r in enumerate(_read_lines(path / "edges.csv"), start=1):
        i, j = (int(v) for v in r.split(","))
        if i == j:
            raise DatasetError(f"edges.csv row {lineno}: self-loop ({i},{j})")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DatasetError(f"edges.csv row {lineno}: duplicate edge ({i},{j})")
        if not (0 <= i < n and 0 <= j < n):
            raise DatasetError(f"edges.csv row {lineno}: node id out of range")
        seen.add(key)
        edges.append(key)

    labels = [int(v) for v in _read_lines(path / "labels.csv")]
    if len(labels) != n:
        raise DatasetError(f"labels.csv has {len(labels)} rows, manifest says {n}")
    for lineno, y in enumerate(labels, start=1):
        if not 0 <= y < c:
            raise DatasetError(f"labels.csv row {lineno}: label {y} not in [0, {c})")

    sp = json.loads((path / "splits.json").read_text())
    split = SplitMask(sp["train"], sp["val"], sp["test"])
    split.validate(n)
    return GraphDataset(features, edges, labels, c), split


def convert_planetoid_raw(content_path, cites_path, out_dir, per_class=20, n_val=500, seed=0):
    """Convert the ``.content``/``.cites`` citation-network text format.

    Each ``.content`` line is ``<paper id> <binary features...> <class name>``;
    each ``.cites`` line is ``<cited id> <citing id>``.  Citations to unknown
    papers and self-citations are dropped.
    """
    ids, feats, names = [], [], []
    for line in _read_lines(content_path):
        parts = line.split()
        ids.append(parts[0])
        feats.append([float(v) for v in parts[1:-1]])
        names.append(parts[-1])
    index = {pid: k for k, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])
    edges = set()
    for line in _read_lines(cites_path):
        a, b = line.split()[:2]
        if a in index and b in index and a != b:
            i, j = index[a], index[b]
            edges.add((min(i, j), max(i, j)))
    ds = GraphDataset(np.array(feats), sorted(edges), labels, len(classes))
    split = standard_split(labels, len(classes), per_class, n_val, np.random.default_rng(seed))
    save_dataset(ds, split, out_dir)
    return ds, split


# ---------------------------------------------------------------- generation

def standard_split(labels, num_classes, per_class, n_val, rng):
    """``per_class`` train nodes per class, ``n_val`` validation, rest test."""
    n = len(labels)
    train = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise DatasetError(f"class {c} has only {len(members)} nodes")
        train.extend(rng.choice(members, per_class, replace=False).tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = np.setdiff1d(np.arange(n), train)
    rest = rng.permutation(rest)
    val = np.sort(rest[:n_val])
    test = np.sort(rest[n_val:])
    return SplitMask(train, val, test)


def generate_planted(n_per_class, num_classes, p_in, p_out, dim, signal, seed,
                     per_class_train=20, n_val=500):
    if not (0 <= p_out < p_in <= 1):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if signal < 0:
        raise ValueError("signal must be nonnegative")
    if num_classes > dim:
        raise ValueError("orthogonal class means need dim >= num_classes")
    if n_per_class < 1 or num_classes < 1:
        raise ValueError("need at least one node and one class")
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)

    # edges: Bernoulli per unordered pair, drawn row by row to bound memory
    src, dst = [], []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        prob = np.where(labels[j] == labels[i], p_in, p_out)
        hit = j[rng.random(len(j)) < prob]
        src.append(np.full(len(hit), i))
        dst.append(hit)
    edges = np.stack([np.concatenate(src), np.concatenate(dst)], axis=1) if n > 1 \
        else np.zeros((0, 2), dtype=np.int64)

    q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    means = q.T  # rows orthonormal
    features = means[labels] * signal + rng.standard_normal((n, dim))

    split = standard_split(labels, num_classes, per_class_train,
                           min(n_val, n - per_class_train * num_classes), rng)
    return GraphDataset(features, edges, labels, num_classes), split


def inject_label_noise(labels, train, rate, num_classes, seed):
    """Asymmetric noise: each train label i becomes (i+1) % C with prob ``rate``."""
    if not 0 <= rate <= 1:
        raise ValueError(f"noise rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    out = np.array(labels, dtype=np.int64, copy=True)
    train = np.asarray(train, dtype=np.int64)
    flip = rng.random(len(train)) < rate
    idx = train[flip]
    out[idx] = (out[idx] + 1) % num_classes
    return out


def subsample_labels(split: SplitMask, labels, k_per_class, seed):
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    chosen = []
    for c in np.unique(labels[split.train]):
        members = split.train[labels[split.train] == c]
        if len(members) < k_per_class:
            raise DatasetError(f"class {c} has {len(members)} labeled nodes, need {k_per_class}")
        chosen.extend(rng.choice(members, k_per_class, replace=False).tolist())
    return SplitMask(np.sort(np.array(chosen, dtype=np.int64)), split.val, split.test)


# ---------------------------------------------------------------- negatives

@dataclass
class NegativeDistribution:
    kind: str
    probs: np.ndarray
    cdf: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, ds: GraphDataset, kind="uniform"):
        n = ds.num_nodes
        if kind == "uniform":
            w = np.ones(n)
        elif kind == "degree":
            w = ds.degrees().astype(np.float64)
            if w.sum() == 0:
                raise ValueError("degree distribution on an edgeless graph")
        else:
            raise ValueError(f"unknown negative distribution {kind!r}")
        probs = w / w.sum()
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        return cls(kind, probs, cdf)

    def draw(self, rng, size):
        return np.searchsorted(self.cdf, rng.random(size), side="right").clip(0, len(self.cdf) - 1)


MAX_RETRIES = 1000


def sample_negatives(dist: NegativeDistribution, k, exclude, rng):
    """``k`` i.i.d. draws from ``dist`` with rejection of ``exclude``."""
    exclude = np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude,
                         dtype=np.int64)
    out = dist.draw(rng, k)
    bad = np.isin(out, exclude)
    tries = 0
    while bad.any():
        tries += 1
        if tries > MAX_RETRIES:
            raise SamplingExhausted("could not draw a negative outside the exclusion set")
        out[bad] = dist.draw(rng, int(bad.sum()))
        bad = np.isin(out, exclude)
    return out


def edge_exclusion(ds: GraphDataset, i, j):
    return np.concatenate([[i, j], ds.neighbors(i), ds.neighbors(j)])


def sample_edge_negatives(ds: GraphDataset, dist: NegativeDistribution, edges, k, rng):
    """(len(edges), k) negatives, each avoiding both endpoints and their neighbours.

    Vectorised rejection: draw everything at once, redraw only the hits.
    """
    edges = np.asarray(edges, dtype=np.int64)
    m = len(edges)
    if m == 0:
        return np.zeros((0, k), dtype=np.int64)
    neg = dist.draw(rng, (m, k))
    bad = _excluded(ds, edges, neg)
    tries = 0
    while bad.any():
        tries += 1
        if tries > MAX_RETRIES:
            raise SamplingExhausted("could not draw negatives outside the exclusion set")
        neg[bad] = dist.draw(rng, int(bad.sum()))
        bad = _excluded(ds, edges, neg)
    return neg


def _is_edge(ds, a, b):
    return ds.has_edge(a, b)


def _excluded(ds, edges, neg):
    i = np.repeat(edges[:, 0:1], neg.shape[1], axis=1)
    j = np.repeat(edges[:, 1:2], neg.shape[1], axis=1)
    bad = (neg == i) | (neg == j)
    rest = ~bad
    if rest.any():
        ii, jj, kk = i[rest], j[rest], neg[rest]
        hit = _is_edge(ds, ii, kk) | _is_edge(ds, jj, kk)
        bad[rest] = hit
    return bad
