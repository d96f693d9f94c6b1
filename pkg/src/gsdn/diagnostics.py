"""Analysis instruments: neighbour cosine-similarity probe, robustness and
ablation sweeps, learning curves."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .bench import GCNParams, gcn_embed, normalized_adjacency
from .graph import GraphDataset, inject_label_noise, subsample_labels
from .model import ModelParams, embed
from .training import TrainConfig, fit_model, run_jobs, summarize


# ---------------------------------------------------------------- similarity

def _adjacency(ds: GraphDataset):
    n = ds.num_nodes
    e = ds.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def hop_pairs(ds: GraphDataset, hop):
    """(i, j) pairs at shortest-path distance exactly ``hop`` (1 or 2), both directions."""
    A = _adjacency(ds)
    if hop == 1:
        M = A
    elif hop == 2:
        A2 = (A @ A).tocsr()
        A2.setdiag(0)
        A2.eliminate_zeros()
        M = A2 - A2.multiply(A)
        M.eliminate_zeros()
    else:
        raise ValueError("hop must be 1 or 2")
    M = M.tocoo()
    keep = M.data != 0
    return M.row[keep], M.col[keep]


def embeddings_of(model, ds: GraphDataset):
    x = np.asarray(ds.features)
    if isinstance(model, GCNParams):
        adj = normalized_adjacency(ds, model.tensors["W0"].dtype)
        return gcn_embed(model, adj, x.astype(model.tensors["W0"].dtype))
    if isinstance(model, ModelParams):
        return embed(model, x.astype(model.tensors["W0"].dtype))
    return np.asarray(model)  # raw embedding matrix


def cosine_similarity_probe(model, ds: GraphDataset, hop=1, pairs=None):
    """Mean over nodes of the mean cosine similarity to their ``hop``-neighbours.

    ``model`` is GSDN params, GCN params, or an (N, F) embedding matrix.
    Nodes without hop-neighbours are skipped; pairs touching a zero-norm
    embedding are dropped with a warning.
    """
    h = np.asarray(embeddings_of(model, ds), dtype=np.float64)
    rows, cols = hop_pairs(ds, hop) if pairs is None else pairs
    norms = np.linalg.norm(h, axis=1)
    ok = (norms[rows] > 0) & (norms[cols] > 0)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} pair(s) with zero-norm embeddings skipped",
                      RuntimeWarning)
        rows, cols = rows[ok], cols[ok]
    if len(rows) == 0:
        return float("nan")
    unit = h / np.where(norms > 0, norms, 1.0)[:, None]
    cos = np.einsum("ij,ij->i", unit[rows], unit[cols])
    n = ds.num_nodes
    sums = np.bincount(rows, weights=cos, minlength=n)
    counts = np.bincount(rows, minlength=n)
    has = counts > 0
    return float(np.clip(np.mean(sums[has] / counts[has]), -1.0, 1.0))


def similarity_callback(ds: GraphDataset):
    """fit() callback logging 1-hop and 2-hop similarity every epoch."""
    p1 = hop_pairs(ds, 1)
    p2 = hop_pairs(ds, 2)

    def cb(params, epoch):
        return {"cos_1hop": cosine_similarity_probe(params, ds, 1, p1),
                "cos_2hop": cosine_similarity_probe(params, ds, 2, p2)}
    return cb


@dataclass
class SimilarityCurve:
    epochs: list
    hop1: list
    hop2: list

    @classmethod
    def from_report(cls, report):
        e = report.epochs
        return cls([r["epoch"] for r in e], [r["cos_1hop"] for r in e],
                   [r["cos_2hop"] for r in e])


def learning_curves(report):
    """Per-epoch train/val cross-entropy with log10 columns for plotting."""
    out = []
    for r in report.epochs:
        out.append({"epoch": r["epoch"], "train_ce": r["train_ce"], "val_ce": r["val_ce"],
                    "log10_train_ce": float(np.log10(r["train_ce"])),
                    "log10_val_ce": float(np.log10(r["val_ce"]))})
    return out


# ---------------------------------------------------------------- tables

@dataclass
class SweepTable:
    """Raw per-(cell, seed) results plus derived mean/std summary."""
    experiment: str
    config: dict
    keys: list
    raw: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def summary(self):
        groups = {}
        for r in self.raw:
            groups.setdefault(tuple(r[k] for k in self.keys), []).append(r)
        out = []
        for key, rows in groups.items():
            tm, ts = summarize([r["test_acc"] for r in rows])
            vm, vs = summarize([r["val_acc"] for r in rows])
            out.append({**dict(zip(self.keys, key)), "seeds": [r["seed"] for r in rows],
                        "test_mean": tm, "test_std": ts, "val_mean": vm, "val_std": vs})
        return out

    def mean(self, **where):
        vals = [r["test_acc"] for r in self.raw if all(r[k] == v for k, v in where.items())]
        return float(np.mean(vals))

    def config_hash(self):
        blob = json.dumps({"config": self.config, "params": self.params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def _csv(self, rows, cols):
        buf = io.StringIO()
        buf.write(f"# gsdn {__version__} experiment={self.experiment} "
                  f"config={json.dumps(self.config, sort_keys=True)} "
                  f"params={json.dumps(self.params, sort_keys=True)}\n")
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (" ".join(map(str, r[c])) if isinstance(r[c], list) else r[c])
                        for c in cols})
        return buf.getvalue()

    def write(self, out_dir, dataset_name="dataset"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{self.experiment}-{dataset_name}-{self.config_hash()}"
        raw_cols = self.keys + ["seed", "val_acc", "test_acc"]
        sum_cols = self.keys + ["seeds", "test_mean", "test_std", "val_mean", "val_std"]
        (out_dir / f"{stem}-raw.csv").write_text(self._csv(self.raw, raw_cols))
        (out_dir / f"{stem}.csv").write_text(self._csv(self.summary(), sum_cols))
        index_path = out_dir / "index.json"
        index = json.loads(index_path.read_text()) if index_path.exists() else {}
        index[stem] = {"experiment": self.experiment, "dataset": dataset_name,
                       "config": self.config, "params": self.params, "summary": f"{stem}.csv",
                       "raw": f"{stem}-raw.csv", "version": __version__}
        index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        return out_dir / f"{stem}.csv"


# ---------------------------------------------------------------- sweeps

def _run_cell(kind, ds, split, config, labels):
    _, report = fit_model(kind, ds, split, config, labels)
    return report.best_val_acc, report.test_acc


def _sweep(experiment, keys, cells, base, n_workers, **params):
    """cells: list of (key values tuple, kind, ds, split, config, labels, seed)."""
    results = run_jobs(_run_cell, [c[1:6] for c in cells], n_workers)
    table = SweepTable(experiment, base.to_dict(), keys, params=params)
    for (vals, *_rest, seed), (va, te) in zip(cells, results):
        table.raw.append({**dict(zip(keys, vals)), "seed": seed, "val_acc": va, "test_acc": te})
    return table


def run_noise_sweep(ds, split, config: TrainConfig, ratios, models=("gsdn", "mlp", "gcn"),
                    seeds=(0, 1, 2, 3, 4), n_workers=1):
    """Asymmetric label noise on the train nodes.  The noise draw depends only
    on the seed, so flips are nested across ratios."""
    for r in ratios:
        if not 0 <= r <= 1:
            raise ValueError(f"noise ratio {r} outside [0, 1]")
    cells = []
    for r in ratios:
        for s in seeds:
            labels = inject_label_noise(ds.labels, split.train, r, ds.num_classes, seed=10_000 + s)
            for m in models:
                cells.append(((r, m), m, ds, split, config.replace(seed=s), labels, s))
    return _sweep("noise", ["ratio", "model"], cells, config, n_workers,
                  ratios=list(ratios), models=list(models), seeds=list(seeds))


def run_label_scarcity_sweep(ds, split, config: TrainConfig, k_values,
                             models=("gsdn", "mlp", "gcn"), seeds=(0, 1, 2, 3, 4), n_workers=1):
    cells = []
    for k in k_values:
        for s in seeds:
            sub = subsample_labels(split, ds.labels, k, seed=20_000 + s)
            for m in models:
                cells.append(((k, m), m, ds, sub, config.replace(seed=s), None, s))
    return _sweep("scarcity", ["k", "model"], cells, config, n_workers,
                  k_values=list(k_values), models=list(models), seeds=list(seeds))


ABLATIONS = {
    "full": {},
    "wo_ns": {"no_negative_samples": True},
    "wo_augment": {"no_mixup": True},
    "wo_ld": {"no_label_distill": True},
    "wo_uniform": {"negative_dist": "degree"},
}


def run_ablations(ds, split, config: TrainConfig, seeds=(0, 1, 2, 3, 4), variants=None,
                  n_workers=1):
    variants = variants or list(ABLATIONS)
    cells = []
    for v in variants:
        for s in seeds:
            cells.append(((v,), "gsdn", ds, split, config.replace(seed=s, **ABLATIONS[v]), None, s))
    return _sweep("ablation", ["variant"], cells, config, n_workers,
                  variants=list(variants), seeds=list(seeds))


SENSITIVITY_LAMBDAS = (0.0, 0.1, 0.3, 0.5, 0.8, 1.0)
SENSITIVITY_BATCHES = (256, 512, 1024, 2048, 4096)


def run_sensitivity(ds, split, config: TrainConfig, lambdas=SENSITIVITY_LAMBDAS,
                    batches=SENSITIVITY_BATCHES, seeds=(0, 1, 2, 3, 4), n_workers=1):
    """One-at-a-time sweeps of lambda (at the base B) and B (at the base lambda)."""
    cells = []
    for lam in lambdas:
        for s in seeds:
            cells.append((("lam", lam), "gsdn", ds, split, config.replace(lam=lam, seed=s), None, s))
    for B in batches:
        for s in seeds:
            cells.append((("B", B), "gsdn", ds, split, config.replace(B=B, seed=s), None, s))
    return _sweep("sensitivity", ["param", "value"], cells, config, n_workers,
                  lambdas=list(lambdas), batches=list(batches), seeds=list(seeds))
