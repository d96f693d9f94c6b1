"""Edge-batch training loop, Adam, model selection and grid search."""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import numerics as nx
from .bench import (gcn_forward, init_gcn, normalized_adjacency, pinned_threads)
from .graph import (GraphDataset, NegativeDistribution, SplitMask, sample_edge_negatives)
from .model import ModelParams, init_params, predict_logits
from .numerics import ConfigError
from .objectives import (EdgeBatch, LossFlags, batch_forward, feat_loss_from,
                         label_loss_from)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    L: int = 2
    F: int = 64
    B: int = 256
    lam: float = 1.0
    dropout: float = 0.0
    K: int = 1
    negative_dist: str = "uniform"
    seed: int = 0
    precision: str = "float32"
    threads: int = 1
    no_negative_samples: bool = False
    no_mixup: bool = False
    no_label_distill: bool = False
    no_mixup_mode: str = "fixed"
    normalize_positives: bool = False

    def validate(self):
        positive = ("lr", "epochs", "L", "F", "B", "K", "threads")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.negative_dist not in ("uniform", "degree"):
            raise ConfigError(f"negative_dist must be uniform or degree, got {self.negative_dist!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.no_mixup_mode not in ("fixed", "neighbor"):
            raise ConfigError(f"no_mixup_mode must be fixed or neighbor, got {self.no_mixup_mode!r}")
        return self

    def flags(self):
        return LossFlags(self.no_negative_samples, self.no_mixup, self.no_label_distill,
                         self.no_mixup_mode, self.normalize_positives)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def mlp_mode(config: TrainConfig):
    """The flag combination that turns GSDN into a plain MLP + CE trainer."""
    return config.replace(lam=0.0, no_negative_samples=True, no_mixup=True,
                          no_label_distill=True)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr, weight_decay=0.0):
    """In-place Adam with bias correction; L2 decay added to the gradient."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise nx.DimensionError(f"grad for {name} has shape {g.shape}, param {w.shape}")
        if weight_decay:
            g = g + weight_decay * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(w.dtype)
    return params


# ---------------------------------------------------------------- epochs

@dataclass
class EpochMetrics:
    epoch: int
    feat_loss: float
    label_loss: float
    total: float
    val_acc: float = float("nan")
    train_ce: float = float("nan")
    val_ce: float = float("nan")
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def iter_edge_batches(ds: GraphDataset, B, rng):
    perm = rng.permutation(ds.num_edges)
    for s in range(0, len(perm), B):
        yield ds.edges[perm[s:s + B]]


def _as_float(v):
    return float(v.value) if isinstance(v, nx.Var) else float(v)


def train_epoch(params: ModelParams, ds: GraphDataset, split: SplitMask, config: TrainConfig,
                state: AdamState, rng, labels=None, dist=None):
    if ds.num_edges == 0:
        raise ValueError("training needs at least one edge")
    labels = ds.labels if labels is None else labels
    train_mask = np.zeros(ds.num_nodes, dtype=bool)
    train_mask[split.train] = True
    flags = config.flags()
    dist = dist or NegativeDistribution.build(ds, config.negative_dist)
    sums = np.zeros(3)
    n_batches = 0
    for edges in iter_edge_batches(ds, config.B, rng):
        if flags.no_negative_samples:
            negs = np.zeros((len(edges), 0), dtype=np.int64)
        else:
            negs = sample_edge_negatives(ds, dist, edges, config.K, rng)
        batch = EdgeBatch(edges, negs)
        tape = nx.Tape()
        P = {k: tape.watch(v, k) for k, v in params.tensors.items()}
        fw = batch_forward(params, ds, batch, "train", rng, config.dropout, P)
        label = label_loss_from(params, fw, labels, train_mask, flags, P)
        feat = feat_loss_from(params, fw, flags, P) if config.lam > 0 else 0.0
        loss = label
        if config.lam > 0:
            loss = nx.add(label, nx.scale(feat, config.lam)) if isinstance(label, nx.Var) \
                else nx.scale(feat, config.lam)
        sums += (_as_float(feat), _as_float(label), _as_float(loss))
        n_batches += 1
        if not isinstance(loss, nx.Var):
            continue
        names = list(P)
        grads = tape.gradient(loss, [P[k] for k in names])
        adam_step(params.tensors, dict(zip(names, grads)), state, config.lr, config.weight_decay)
        tape.reset()
    f, l, t = sums / max(n_batches, 1)
    return EpochMetrics(0, f, l, t)


def accuracy(pred, labels):
    return float(np.mean(pred == labels)) if len(labels) else float("nan")


def _ce(logits, labels):
    if len(labels) == 0:
        return float("nan")
    return float(nx.softmax_ce(np.asarray(logits, np.float64), labels)) / len(labels)


# ---------------------------------------------------------------- reports

@dataclass
class RunReport:
    config: dict
    config_hash: str
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    test_acc: float = float("nan")
    model: str = "gsdn"
    environment: dict = field(default_factory=dict)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)

    METRIC_COLUMNS = ("epoch", "feat_loss", "label_loss", "total", "val_acc", "train_ce", "val_ce")

    def metrics_csv(self):
        """Deterministic per-epoch metrics (wall time lives in ``timing_csv``)."""
        header = f"# gsdn {__version__} model={self.model} config={json.dumps(self.config, sort_keys=True)}\n"
        lines = [",".join(self.METRIC_COLUMNS)]
        for e in self.epochs:
            lines.append(",".join(repr(float(e[c])) if c != "epoch" else str(e[c])
                                  for c in self.METRIC_COLUMNS))
        return header + "\n".join(lines) + "\n"

    def timing_csv(self):
        lines = ["epoch,seconds"] + [f"{e['epoch']},{e['seconds']:.6f}" for e in self.epochs]
        return "\n".join(lines) + "\n"


def environment(config: TrainConfig):
    return {"threads": config.threads, "precision": config.precision,
            "bn_eps": nx.BN_EPS, "bn_momentum": nx.BN_MOMENTUM, "version": __version__}


def _record(report, m: EpochMetrics):
    d = dataclasses.asdict(m)
    extra = d.pop("extra")
    d.update(extra)
    report.epochs.append(d)


# ---------------------------------------------------------------- fit

def fit(ds: GraphDataset, split: SplitMask, config: TrainConfig, labels=None, callback=None):
    """Train for ``config.epochs`` and return the best-validation params.

    ``labels`` overrides the training labels (noise experiments); validation
    and test accuracy always use the dataset's true labels.  ``callback``
    (params, epoch) -> dict is merged into each epoch record.
    """
    config.validate()
    dtype = DTYPES[config.precision]
    ss = np.random.SeedSequence(config.seed)
    init_ss, loop_ss = ss.spawn(2)
    params = init_params(ds.num_features, config.F, config.L, ds.num_classes,
                         init_ss, dtype)
    rng = np.random.default_rng(loop_ss)
    state = AdamState()
    train_labels = ds.labels if labels is None else np.asarray(labels)
    dist = NegativeDistribution.build(ds, config.negative_dist)
    x = np.asarray(ds.features, dtype=dtype)
    report = RunReport(config.to_dict(), config.hash(), model="gsdn",
                       environment=environment(config))
    best, best_acc = None, -1.0
    with pinned_threads(config.threads):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            m = train_epoch(params, ds, split, config, state, rng, train_labels, dist)
            m.seconds = time.perf_counter() - t0
            m.epoch = epoch
            logits_tr = predict_logits(params, x[split.train])
            logits_va = predict_logits(params, x[split.val])
            m.val_acc = accuracy(np.argmax(logits_va, 1), ds.labels[split.val])
            m.train_ce = _ce(logits_tr, train_labels[split.train])
            m.val_ce = _ce(logits_va, ds.labels[split.val])
            if callback is not None:
                m.extra = callback(params, epoch) or {}
            _record(report, m)
            if m.val_acc > best_acc:
                best_acc, best = m.val_acc, params.copy()
                report.best_epoch = epoch
        report.best_val_acc = best_acc
        pred = np.argmax(predict_logits(best, x[split.test]), 1)
        report.test_acc = accuracy(pred, ds.labels[split.test])
    return best, report


def train_gcn_reference(ds: GraphDataset, split: SplitMask, config: TrainConfig, labels=None,
                        callback=None):
    """Full-batch GCN with cross-entropy on the train nodes, same optimizer protocol."""
    config.validate()
    dtype = DTYPES[config.precision]
    ss = np.random.SeedSequence(config.seed)
    init_ss, loop_ss = ss.spawn(2)
    params = init_gcn(ds.num_features, config.F, config.L, ds.num_classes,
                      np.random.default_rng(init_ss), dtype)
    rng = np.random.default_rng(loop_ss)
    state = AdamState()
    adj = normalized_adjacency(ds, dtype)
    x = np.asarray(ds.features, dtype=dtype)
    train_labels = ds.labels if labels is None else np.asarray(labels)
    y_tr = train_labels[split.train]
    report = RunReport(config.to_dict(), config.hash(), model="gcn",
                       environment=environment(config))
    best, best_acc = None, -1.0
    with pinned_threads(config.threads):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            tape = nx.Tape()
            P = {k: tape.watch(v, k) for k, v in params.tensors.items()}
            logits = gcn_forward(params, adj, x, "train", rng, config.dropout, P)
            loss = nx.scale(nx.softmax_ce(nx.gather_rows(logits, split.train), y_tr),
                            1.0 / len(split.train))
            names = list(P)
            grads = tape.gradient(loss, [P[k] for k in names])
            adam_step(params.tensors, dict(zip(names, grads)), state, config.lr,
                      config.weight_decay)
            out = gcn_forward(params, adj, x)
            m = EpochMetrics(epoch, 0.0, float(loss.value), float(loss.value),
                             seconds=time.perf_counter() - t0)
            m.val_acc = accuracy(np.argmax(out[split.val], 1), ds.labels[split.val])
            m.train_ce = _ce(out[split.train], y_tr)
            m.val_ce = _ce(out[split.val], ds.labels[split.val])
            if callback is not None:
                m.extra = callback(params, epoch) or {}
            _record(report, m)
            if m.val_acc > best_acc:
                best_acc, best = m.val_acc, params.copy()
                report.best_epoch = epoch
        report.best_val_acc = best_acc
        out = gcn_forward(best, adj, x)
        report.test_acc = accuracy(np.argmax(out[split.test], 1), ds.labels[split.test])
    return best, report


def fit_model(kind, ds, split, config, labels=None, callback=None):
    """Dispatch on model family: gsdn, mlp (flag-reduced gsdn) or gcn."""
    if kind == "gsdn":
        return fit(ds, split, config, labels, callback)
    if kind == "mlp":
        return fit(ds, split, mlp_mode(config), labels, callback)
    if kind == "gcn":
        return train_gcn_reference(ds, split, config, labels, callback)
    raise ConfigError(f"unknown model {kind!r}")


# ---------------------------------------------------------------- jobs

def run_jobs(fn, jobs, n_workers=1):
    """Run ``fn(*job)`` for every job, preserving job order in the result."""
    if n_workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as ex:
        futs = [ex.submit(fn, *job) for job in jobs]
        return [f.result() for f in futs]


def _grid_cell(ds, split, config):
    _, report = fit(ds, split, config)
    return report.best_val_acc, report.test_acc


def summarize(values):
    a = np.asarray(values, float)
    return float(a.mean()), float(a.std())


def grid_search(ds, split, base: TrainConfig, grid: dict, seeds=(0, 1, 2, 3, 4), n_workers=1):
    """Train every (F, B, lam) cell over ``seeds``; pick the best mean val accuracy."""
    Fs = list(grid.get("F", [base.F]))
    Bs = list(grid.get("B", [base.B]))
    lams = list(grid.get("lam", [base.lam]))
    cells = list(itertools.product(Fs, Bs, lams))
    if not cells:
        raise ValueError("empty grid")
    jobs = [(ds, split, base.replace(F=F, B=B, lam=lam, seed=s))
            for (F, B, lam) in cells for s in seeds]
    results = run_jobs(_grid_cell, jobs, n_workers)
    table = []
    it = iter(results)
    for (F, B, lam) in cells:
        vals, tests = zip(*[next(it) for _ in seeds])
        vm, vs = summarize(vals)
        tm, ts = summarize(tests)
        table.append({"F": F, "B": B, "lam": lam, "seeds": list(seeds),
                      "val_accs": list(vals), "test_accs": list(tests),
                      "val_mean": vm, "val_std": vs, "test_mean": tm, "test_std": ts})
    best = max(table, key=lambda r: r["val_mean"])
    return base.replace(F=best["F"], B=best["B"], lam=best["lam"]), table
