"""Neighbourhood self-distillation losses.

``feat_loss_full`` / ``label_loss_full`` evaluate the whole-graph objectives
exactly (small graphs only).  The ``*_batch`` versions are the edge-sampled
estimators used for training and run on the tape.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph import GraphDataset, SplitMask
from .model import (ModelParams, backbone_forward, head_f, head_g, mixup_embed,
                    mixup_scores)


@dataclass(frozen=True)
class LossFlags:
    no_negative_samples: bool = False
    no_mixup: bool = False
    no_label_distill: bool = False
    # "fixed": beta = 0.5; "neighbor": z' = g(h_j)
    no_mixup_mode: str = "fixed"
    # softmax the positive terms as well as the negatives
    normalize_positives: bool = False


@dataclass
class EdgeBatch:
    edges: np.ndarray      # (m, 2)
    negatives: np.ndarray  # (m, K)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(len(self.edges), -1)

    @property
    def nodes(self):
        """V_b: endpoints of the batch edges."""
        return np.unique(self.edges)

    def union(self):
        return np.unique(np.concatenate([self.edges.ravel(), self.negatives.ravel()]))


@dataclass
class LossBreakdown:
    feat: float
    label: float
    total: float
    lam: float


def total_loss(feat, label, lam):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(float(feat), float(label), float(label) + lam * float(feat), lam)


# ---------------------------------------------------------------- batch path

@dataclass
class BatchForward:
    """Backbone outputs for the union of nodes a batch touches."""
    union: np.ndarray
    x: np.ndarray       # raw features of union rows
    h: object           # (|U|, F) embeddings, Var when taped
    batch: EdgeBatch

    def rows(self, ids):
        return np.searchsorted(self.union, ids)


def batch_forward(params: ModelParams, ds: GraphDataset, batch: EdgeBatch, mode="train",
                  rng=None, dropout=0.0, P=None):
    union = batch.union()
    x = np.asarray(ds.features[union], dtype=params.tensors["W0"].dtype)
    h, _ = backbone_forward(params, x, mode, rng, dropout, P)
    return BatchForward(union, x, h, batch)


def _softmax_rows_dist(a, b):
    return nx.sq_l2(nx.row_softmax(a), nx.row_softmax(b))


def feat_loss_from(params: ModelParams, fw: BatchForward, flags=LossFlags(), P=None):
    batch = fw.batch
    if len(batch.edges) == 0:
        raise ValueError("empty batch")
    ri = fw.rows(batch.edges[:, 0])
    rj = fw.rows(batch.edges[:, 1])
    h_i = nx.gather_rows(fw.h, ri)
    h_j = nx.gather_rows(fw.h, rj)
    y_i = head_f(params, h_i, P)
    y_j = head_f(params, h_j, P)

    if flags.no_mixup and flags.no_mixup_mode == "neighbor":
        zp_ij = head_g(params, h_j, P)
        zp_ji = head_g(params, h_i, P)
    else:
        if flags.no_mixup:
            half = np.full((len(ri), 1), 0.5, dtype=fw.x.dtype)
            b_ij = b_ji = half
        else:
            left, right = mixup_scores(params, fw.x, P)
            b_ij = nx.sigmoid(nx.add(nx.gather_rows(left, ri), nx.gather_rows(right, rj)))
            b_ji = nx.sigmoid(nx.add(nx.gather_rows(left, rj), nx.gather_rows(right, ri)))
        zp_ij = mixup_embed(params, h_i, h_j, b_ij, P)
        zp_ji = mixup_embed(params, h_j, h_i, b_ji, P)

    if flags.normalize_positives:
        pos = nx.add(_softmax_rows_dist(y_i, zp_ij), _softmax_rows_dist(y_j, zp_ji))
    else:
        pos = nx.add(nx.sq_l2(y_i, zp_ij), nx.sq_l2(y_j, zp_ji))
    per_edge = pos
    if not flags.no_negative_samples:
        K = batch.negatives.shape[1]
        yhat = nx.row_softmax(head_f(params, fw.h, P))
        zhat = nx.row_softmax(head_g(params, fw.h, P))
        rk = fw.rows(batch.negatives.ravel())
        yi_rep = nx.gather_rows(yhat, np.repeat(ri, K))
        yj_rep = nx.gather_rows(yhat, np.repeat(rj, K))
        zk = nx.gather_rows(zhat, rk)
        neg = nx.add(nx.sq_l2(yi_rep, zk), nx.sq_l2(yj_rep, zk))
        # mean over K negatives per edge, then subtract
        neg_per_edge = nx.scale(_segment_sum(neg, len(ri), K), 1.0 / K)
        per_edge = nx.sub(pos, neg_per_edge)
    return nx.mean(per_edge)


def _segment_sum(v, m, K):
    vv = v.value if isinstance(v, nx.Var) else v
    out = vv.reshape(m, K).sum(axis=1)
    return nx._emit(out, (v,), lambda g: (np.repeat(g, K),))


def label_loss_from(params: ModelParams, fw: BatchForward, labels, train_mask,
                    flags=LossFlags(), P=None):
    """Mean over labeled batch nodes of CE(own f-head) + sum CE(neighbour g-heads)."""
    batch = fw.batch
    labels = np.asarray(labels)
    train_mask = np.asarray(train_mask, dtype=bool)
    vb = batch.nodes
    labeled = vb[train_mask[vb]]
    if len(labeled) == 0:
        return 0.0
    h_lab = nx.gather_rows(fw.h, fw.rows(labeled))
    loss = nx.softmax_ce(head_f(params, h_lab, P), labels[labeled])
    if not flags.no_label_distill:
        e = batch.edges
        tgt, nbr = [], []
        for a, b in ((0, 1), (1, 0)):
            m = train_mask[e[:, a]]
            tgt.append(e[m, a])
            nbr.append(e[m, b])
        tgt = np.concatenate(tgt)
        nbr = np.concatenate(nbr)
        if len(tgt):
            z_n = head_g(params, nx.gather_rows(fw.h, fw.rows(nbr)), P)
            loss = nx.add(loss, nx.softmax_ce(z_n, labels[tgt]))
    return nx.scale(loss, 1.0 / len(labeled))


def feat_loss_batch(params, ds, batch, mode="eval", rng=None, dropout=0.0,
                    flags=LossFlags(), P=None):
    fw = batch_forward(params, ds, batch, mode, rng, dropout, P)
    return feat_loss_from(params, fw, flags, P)


def label_loss_batch(params, ds, batch, labels, train_mask, mode="eval", rng=None,
                     dropout=0.0, flags=LossFlags(), P=None):
    fw = batch_forward(params, ds, batch, mode, rng, dropout, P)
    return label_loss_from(params, fw, labels, train_mask, flags, P)


def expected_negative_term(params, ds, batch, dist, exclude_neighbors=True):
    """Exact E[neg term] of one batch under ``dist`` conditioned on the sampler's
    exclusion set, averaged over batch edges (eval-mode embeddings)."""
    h, _ = backbone_forward(params, np.asarray(ds.features, params.tensors["W0"].dtype), "eval")
    yhat = nx.row_softmax(head_f(params, h))
    zhat = nx.row_softmax(head_g(params, h))
    vals = []
    for i, j in batch.edges:
        allowed = np.ones(ds.num_nodes, dtype=bool)
        allowed[[i, j]] = False
        if exclude_neighbors:
            allowed[ds.neighbors(i)] = False
            allowed[ds.neighbors(j)] = False
        w = dist.probs * allowed
        w = w / w.sum()
        d = ((yhat[i] - zhat) ** 2).sum(1) + ((yhat[j] - zhat) ** 2).sum(1)
        vals.append(float((w * d).sum()))
    return float(np.mean(vals))


# ---------------------------------------------------------------- full graph

def _full_outputs(params, ds):
    x = np.asarray(ds.features, dtype=params.tensors["W0"].dtype)
    h, _ = backbone_forward(params, x, "eval")
    return x, h, head_f(params, h), head_g(params, h)


def feat_loss_full(params: ModelParams, ds: GraphDataset, flags=LossFlags()):
    """Whole-graph feature-level objective.

    Positives use raw logits, negatives softmax outputs; the negative set of
    node i is every k != i not adjacent to i, normalised by its true size.
    Isolated nodes are skipped.
    """
    x, h, y, z = _full_outputs(params, ds)
    yhat = nx.row_softmax(y)
    zhat = nx.row_softmax(z)
    n = ds.num_nodes
    left, right = mixup_scores(params, x)
    terms = []
    skipped = 0
    for i in range(n):
        nb = ds.neighbors(i)
        if len(nb) == 0:
            skipped += 1
            continue
        if flags.no_mixup and flags.no_mixup_mode == "neighbor":
            zp = head_g(params, h[nb])
        else:
            if flags.no_mixup:
                beta = np.full((len(nb), 1), 0.5)
            else:
                beta = nx.sigmoid(left[i] + right[nb])
            zp = mixup_embed(params, np.repeat(h[i:i + 1], len(nb), 0), h[nb], beta)
        if flags.normalize_positives:
            pos = nx.sq_l2(np.repeat(yhat[i:i + 1], len(nb), 0), nx.row_softmax(zp)).mean()
        else:
            pos = nx.sq_l2(np.repeat(y[i:i + 1], len(nb), 0), zp).mean()
        neg = 0.0
        if not flags.no_negative_samples:
            mask = np.ones(n, dtype=bool)
            mask[i] = False
            mask[nb] = False
            if mask.any():
                neg = ((yhat[i] - zhat[mask]) ** 2).sum(1).mean()
        terms.append(pos - neg)
    if skipped:
        warnings.warn(f"{skipped} isolated node(s) skipped in feature loss", RuntimeWarning)
    return float(np.mean(terms)) if terms else 0.0


def label_loss_terms(params: ModelParams, ds: GraphDataset, split: SplitMask, labels=None,
                     flags=LossFlags()):
    """Per-labeled-node label-level loss, as {node: value}."""
    labels = ds.labels if labels is None else np.asarray(labels)
    _, _, y, z = _full_outputs(params, ds)
    out = {}
    for i in split.train:
        v = nx.cross_entropy(y[i], labels[i])
        if not flags.no_label_distill:
            for j in ds.neighbors(i):
                v += nx.cross_entropy(z[j], labels[i])
        out[int(i)] = v
    return out


def label_loss_full(params, ds, split, labels=None, flags=LossFlags()):
    return float(sum(label_loss_terms(params, ds, split, labels, flags).values()))
