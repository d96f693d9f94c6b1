import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdn.bench import init_gcn
from gsdn.diagnostics import (ABLATIONS, SweepTable, cosine_similarity_probe, hop_pairs,
                              learning_curves, run_ablations, run_label_scarcity_sweep,
                              run_noise_sweep, run_sensitivity, similarity_callback,
                              SimilarityCurve)
from gsdn.graph import GraphDataset, generate_planted
from gsdn.model import embed, init_params
from gsdn.training import TrainConfig, fit

from .helpers import random_graph


def _path(n):
    return GraphDataset(np.zeros((n, 1)), [(i, i + 1) for i in range(n - 1)], np.zeros(n, int), 1)


def _bfs_dist(ds, s):
    dist = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for v in ds.neighbors(u):
                if int(v) not in dist:
                    dist[int(v)] = dist[u] + 1
                    nxt.append(int(v))
        frontier = nxt
    return dist


def test_hop_pairs_match_bfs():
    ds = random_graph(12, 0.25, seed=7)
    for hop in (1, 2):
        r, c = hop_pairs(ds, hop)
        got = set(zip(r.tolist(), c.tolist()))
        want = {(i, j) for i in range(12) for j, d in _bfs_dist(ds, i).items() if d == hop}
        assert got == want
    with pytest.raises(ValueError):
        hop_pairs(ds, 3)
    # a triangle has no node at distance exactly two
    tri = GraphDataset(np.zeros((3, 1)), [(0, 1), (1, 2), (0, 2)], np.zeros(3, int), 1)
    assert len(hop_pairs(tri, 2)[0]) == 0


def test_probe_trivial_cases():
    ds = _path(6)
    assert cosine_similarity_probe(np.ones((6, 4)), ds, 1) == pytest.approx(1.0)
    assert cosine_similarity_probe(np.ones((6, 4)), ds, 2) == pytest.approx(1.0)
    assert cosine_similarity_probe(np.eye(6), ds, 1) == pytest.approx(0.0)
    alt = np.array([[1.0, 0.0], [-1.0, 0.0]] * 3)
    assert cosine_similarity_probe(alt, ds, 1) == pytest.approx(-1.0)
    assert cosine_similarity_probe(alt, ds, 2) == pytest.approx(1.0)


def test_probe_skips_zero_norm_pairs():
    h = np.ones((4, 2))
    h[1] = 0
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        v = cosine_similarity_probe(h, _path(4), 1)
    assert v == pytest.approx(1.0)
    edgeless = GraphDataset(np.zeros((3, 1)), [], np.zeros(3, int), 1)
    assert np.isnan(cosine_similarity_probe(np.ones((3, 2)), edgeless, 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 100))
def test_probe_invariant_to_positive_rescaling(seed, scale):
    ds = random_graph(10, 0.3, seed)
    h = np.random.default_rng(seed).normal(size=(10, 3))
    a = cosine_similarity_probe(h, ds, 1)
    b = cosine_similarity_probe(h * scale, ds, 1)
    if np.isnan(a):
        assert np.isnan(b)
    else:
        assert a == pytest.approx(b, abs=1e-12)
        assert -1 <= a <= 1


def test_probe_accepts_models():
    ds = random_graph(10, 0.4, seed=1)
    p = init_params(4, 6, 2, 3, seed=0)
    assert cosine_similarity_probe(p, ds, 1) == pytest.approx(
        cosine_similarity_probe(embed(p, ds.features.astype(np.float32)), ds, 1))
    g = init_gcn(4, 6, 2, 3, 0)
    assert -1 <= cosine_similarity_probe(g, ds, 2) <= 1


@pytest.fixture(scope="module")
def tiny():
    return generate_planted(20, 2, 0.3, 0.02, 6, 2.0, seed=0, per_class_train=4, n_val=10)


def test_similarity_callback_and_curves(tiny):
    ds, split = tiny
    _, rep = fit(ds, split, TrainConfig(epochs=3, F=8, B=32), callback=similarity_callback(ds))
    curve = SimilarityCurve.from_report(rep)
    assert curve.epochs == [1, 2, 3]
    assert all(-1 <= v <= 1 for v in curve.hop1 + curve.hop2)
    lc = learning_curves(rep)
    assert lc[0]["log10_train_ce"] == pytest.approx(np.log10(lc[0]["train_ce"]))
    assert "cos_1hop" in rep.epochs[0] and "cos_1hop" not in rep.metrics_csv()


def test_noise_sweep_structure(tiny):
    ds, split = tiny
    cfg = TrainConfig(epochs=3, F=8, B=32)
    t = run_noise_sweep(ds, split, cfg, [0.0, 0.5], ("gsdn", "gcn"), seeds=(0, 1))
    assert len(t.raw) == 2 * 2 * 2
    clean = [fit(ds, split, cfg.replace(seed=s))[1].test_acc for s in (0, 1)]
    assert [r["test_acc"] for r in t.raw if r["ratio"] == 0.0 and r["model"] == "gsdn"] == clean
    with pytest.raises(ValueError):
        run_noise_sweep(ds, split, cfg, [1.5], ("gsdn",), seeds=(0,))


def test_scarcity_full_k_matches_standard_split(tiny):
    ds, split = tiny
    cfg = TrainConfig(epochs=3, F=8, B=32)
    t = run_label_scarcity_sweep(ds, split, cfg, [4], ("gsdn",), seeds=(0,))
    assert t.raw[0]["test_acc"] == fit(ds, split, cfg)[1].test_acc


def test_ablation_and_sensitivity_tables(tiny, tmp_path):
    ds, split = tiny
    cfg = TrainConfig(epochs=2, F=8, B=32)
    t = run_ablations(ds, split, cfg, seeds=(0, 1))
    assert {r["variant"] for r in t.raw} == set(ABLATIONS)
    s = run_sensitivity(ds, split, cfg, lambdas=(0.0, 0.5), batches=(32, 64), seeds=(0,))
    assert [(r["param"], r["value"]) for r in s.raw] == [("lam", 0.0), ("lam", 0.5),
                                                          ("B", 32), ("B", 64)]
    # summary recomputed from raw cells matches exactly
    for row in t.summary():
        cells = [r["test_acc"] for r in t.raw if r["variant"] == row["variant"]]
        assert row["test_mean"] == float(np.mean(cells)) and row["seeds"] == [0, 1]

    path = t.write(tmp_path, "tiny")
    assert path.name.startswith("ablation-tiny-") and path.exists()
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# gsdn ") and '"epochs": 2' in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == len(ABLATIONS)
    s.write(tmp_path, "tiny")
    index = json.loads((tmp_path / "index.json").read_text())
    assert len(index) == 2
    # the config stanza alone re-creates the sweep
    entry = next(v for v in index.values() if v["experiment"] == "ablation")
    again = run_ablations(ds, split, TrainConfig.from_dict(entry["config"]),
                          **entry["params"])
    assert again.raw == t.raw


def test_sweep_table_mean():
    t = SweepTable("x", {}, ["k"], [{"k": 1, "seed": 0, "val_acc": 0.5, "test_acc": 0.2},
                                    {"k": 1, "seed": 1, "val_acc": 0.7, "test_acc": 0.4},
                                    {"k": 2, "seed": 0, "val_acc": 0.1, "test_acc": 0.9}])
    assert t.mean(k=1) == pytest.approx(0.3)
    assert len(t.summary()) == 2
