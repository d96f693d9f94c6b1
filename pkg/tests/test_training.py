import json

import numpy as np
import pytest

from gsdn import numerics as nx
from gsdn.graph import GraphDataset, generate_planted
from gsdn.model import init_params
from gsdn.numerics import ConfigError
from gsdn.objectives import EdgeBatch, batch_forward, feat_loss_from, label_loss_from
from gsdn.training import (AdamState, TrainConfig, adam_step, fit, fit_model, grid_search,
                           mlp_mode, train_epoch, train_gcn_reference)

from .helpers import random_graph, randomized_params, split_of


@pytest.fixture(scope="module")
def small():
    return generate_planted(40, 3, 0.15, 0.01, 8, 2.0, seed=2, per_class_train=5, n_val=30)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_noop():
    w = {"w": np.array([1.0, -2.0])}
    adam_step(w, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(w["w"], [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    w = {"w": np.array([1.0, -2.0, 3.0])}
    st = AdamState()
    adam_step(w, {"w": np.array([0.5, -7.0, 1e-3])}, st, lr=0.01)
    np.testing.assert_allclose(w["w"], [0.99, -1.99, 2.99], atol=1e-7)
    assert st.step == 1
    with pytest.raises(nx.DimensionError):
        adam_step(w, {"w": np.zeros(2)}, st, lr=0.01)


def test_adam_matches_scalar_oracle():
    # independent re-derivation of the update on f(w) = w^2
    w = {"w": np.array([1.0])}
    st = AdamState()
    m = v = 0.0
    ref = 1.0
    trace = []
    for t in range(1, 101):
        adam_step(w, {"w": 2 * w["w"]}, st, lr=0.01, weight_decay=0.0)
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        trace.append(abs(w["w"][0]))
    assert w["w"][0] == pytest.approx(ref, rel=1e-12)
    assert all(a > b for a, b in zip(trace, trace[1:]))


def test_weight_decay_shrinks_norm_without_data_gradient():
    w = {"w": np.random.default_rng(0).normal(size=5)}
    st = AdamState()
    norms = [np.linalg.norm(w["w"])]
    for _ in range(50):
        adam_step(w, {"w": np.zeros(5)}, st, lr=0.01, weight_decay=5e-4)
        norms.append(np.linalg.norm(w["w"]))
    assert all(a > b for a, b in zip(norms, norms[1:]))


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.weight_decay, c.epochs, c.L) == (0.01, 5e-4, 200, 2)
    for field, bad in (("lr", 0), ("B", -1), ("dropout", 1.0), ("lam", -0.5),
                       ("negative_dist", "zipf"), ("precision", "float16")):
        with pytest.raises(ConfigError, match=field):
            c.replace(**{field: bad}).validate()
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_config_json_round_trip_and_hash():
    c = TrainConfig(F=32, lam=0.3, no_mixup=True)
    d = TrainConfig.from_json(c.to_json())
    assert d == c and d.hash() == c.hash()
    assert c.replace(seed=1).hash() != c.hash()
    assert json.loads(c.to_json())["F"] == 32


def test_mlp_mode_flags():
    m = mlp_mode(TrainConfig(lam=0.8))
    assert m.lam == 0 and m.no_negative_samples and m.no_mixup and m.no_label_distill


# ---------------------------------------------------------------- loop

def test_ablation_flags_change_gradients():
    ds = random_graph(10, 0.4, seed=3)
    p = randomized_params(4, 5, 2, 3, seed=2)
    batch = EdgeBatch(ds.edges[:6], np.random.default_rng(0).integers(0, 10, size=(6, 2)))
    mask = np.zeros(10, bool)
    mask[[0, 2, 4, 7]] = True
    base = TrainConfig()

    def grads(config):
        tape = nx.Tape()
        P = {k: tape.watch(v) for k, v in p.tensors.items()}
        fw = batch_forward(p, ds, batch, "eval", None, 0.0, P)
        flags = config.flags()
        loss = nx.add(label_loss_from(p, fw, ds.labels, mask, flags, P),
                      nx.scale(feat_loss_from(p, fw, flags, P), config.lam))
        return np.concatenate([g.ravel() for g in tape.gradient(loss, list(P.values()))])

    g0 = grads(base)
    for kw in ({"no_negative_samples": True}, {"no_mixup": True}, {"no_label_distill": True},
               {"no_mixup": True, "no_mixup_mode": "neighbor"}):
        assert not np.allclose(grads(base.replace(**kw)), g0), kw


def test_no_objective_freezes_params():
    # labeled nodes untouched by any edge and lam = 0: nothing to optimise
    x = np.random.default_rng(0).normal(size=(6, 3))
    ds = GraphDataset(x, [(0, 1), (1, 2)], [0, 1, 0, 1, 0, 1], 2)
    split = split_of([4, 5], [3], [0])
    p = init_params(3, 4, 1, 2, seed=0, dtype=np.float64)
    before = p.copy()
    cfg = mlp_mode(TrainConfig(B=1))
    m = train_epoch(p, ds, split, cfg, AdamState(), np.random.default_rng(0))
    assert m.total == 0.0
    for k in p.tensors:
        np.testing.assert_array_equal(p.tensors[k], before.tensors[k])


def test_train_epoch_requires_edges():
    ds = GraphDataset(np.ones((3, 2)), [], [0, 1, 0], 2)
    with pytest.raises(ValueError):
        train_epoch(init_params(2, 3, 1, 2, 0), ds, split_of([0]), TrainConfig(),
                    AdamState(), np.random.default_rng(0))


def test_fit_is_deterministic_and_selects_best(small):
    ds, split = small
    cfg = TrainConfig(epochs=15, F=16, B=64)
    _, a = fit(ds, split, cfg)
    _, b = fit(ds, split, cfg)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.test_acc == b.test_acc
    _, c = fit(ds, split, cfg.replace(seed=1))
    assert c.metrics_csv() != a.metrics_csv()
    vals = [e["val_acc"] for e in a.epochs]
    assert a.best_val_acc == max(vals) >= vals[0]
    assert vals[a.best_epoch - 1] == a.best_val_acc
    assert a.config_hash == cfg.hash()
    assert a.metrics_csv().startswith("# gsdn ")


def test_mlp_kind_equals_flag_combination(small):
    ds, split = small
    cfg = TrainConfig(epochs=5, F=16, B=64)
    _, a = fit_model("mlp", ds, split, cfg)
    _, b = fit(ds, split, cfg.replace(lam=0.0, no_negative_samples=True, no_mixup=True,
                                      no_label_distill=True))
    assert a.metrics_csv() == b.metrics_csv()


def test_loss_decreases_on_planted_graph():
    ds, split = generate_planted(200, 3, 0.05, 0.005, 32, 1.0, seed=1)
    _, rep = fit(ds, split, TrainConfig(epochs=50))
    assert rep.epochs[49]["total"] < rep.epochs[0]["total"]


def test_signal_three_accuracy_well_above_chance():
    ds, split = generate_planted(100, 3, 0.05, 0.005, 16, 3.0, seed=4, n_val=100)
    _, rep = fit(ds, split, TrainConfig(epochs=40, B=128))
    assert rep.test_acc > 1 / 3 + 0.3


def test_gcn_reference_uses_structure():
    ds, split = generate_planted(100, 3, 0.1, 0.005, 16, 0.0, seed=5, n_val=100)
    cfg = TrainConfig(epochs=60, B=128)
    _, gcn = train_gcn_reference(ds, split, cfg)
    _, mlp = fit_model("mlp", ds, split, cfg)
    _, gcn2 = train_gcn_reference(ds, split, cfg)
    assert gcn.metrics_csv() == gcn2.metrics_csv()
    assert gcn.test_acc > 1 / 3 + 0.2
    assert abs(mlp.test_acc - 1 / 3) < 0.15


def test_gcn_on_edgeless_graph_tracks_mlp():
    ds, split = generate_planted(60, 3, 0.1, 0.005, 16, 2.0, seed=6, n_val=60)
    edgeless = ds.with_edges([])
    _, gcn = train_gcn_reference(edgeless, split, TrainConfig(epochs=60))
    _, mlp = fit_model("mlp", ds, split, TrainConfig(epochs=60, B=64))
    assert abs(gcn.test_acc - mlp.test_acc) < 0.1


# ---------------------------------------------------------------- grid

def test_grid_cardinality_and_singleton(small):
    ds, split = small
    base = TrainConfig(epochs=4, F=8, B=64)
    best, table = grid_search(ds, split, base, {"F": [8, 16], "B": [64], "lam": [0.0, 0.5]},
                              seeds=(0, 1))
    assert len(table) == 4
    assert all(len(r["val_accs"]) == 2 for r in table)
    top = max(table, key=lambda r: r["val_mean"])
    assert (best.F, best.B, best.lam) == (top["F"], top["B"], top["lam"])
    for r in table:
        assert r["val_mean"] == pytest.approx(np.mean(r["val_accs"]))

    _, one = grid_search(ds, split, base, {"F": [8], "B": [64], "lam": [1.0]}, seeds=(3,))
    _, rep = fit(ds, split, base.replace(lam=1.0, seed=3))
    assert one[0]["test_accs"] == [rep.test_acc]
    assert one[0]["val_accs"] == [rep.best_val_acc]
    with pytest.raises(ValueError):
        grid_search(ds, split, base, {"F": [], "B": [64], "lam": [1.0]}, seeds=(0,))
