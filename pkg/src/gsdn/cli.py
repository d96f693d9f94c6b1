"""Command-line entry point: generate | ingest | train | evaluate | bench | experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (GCNParams, bench_latency, checkpoint_kind, count_fetches, init_gcn,
                    load_gcn, normalized_adjacency, gcn_forward, save_gcn, thread_count)
from .graph import DatasetError, convert_planetoid_raw, generate_planted, load_dataset, save_dataset
from .model import init_params, load_checkpoint, predict_logits, save_checkpoint
from .numerics import ConfigError
from .training import DTYPES, TrainConfig, fit_model, grid_search, mlp_mode

EXPERIMENTS = ("noise", "scarcity", "ablation", "sensitivity")


class UsageError(Exception):
    """Bad flags, config or inputs: exit code 2."""


# ---------------------------------------------------------------- parsing helpers

def parse_range(text, cast=float):
    """'a:b' (step 1), 'a:b:s' inclusive ranges, or comma lists."""
    if ":" not in text:
        return [cast(v) for v in text.split(",") if v]
    parts = [float(v) for v in text.split(":")]
    if len(parts) == 2:
        parts.append(1.0)
    if len(parts) != 3 or parts[2] <= 0:
        raise UsageError(f"bad range {text!r}")
    a, b, s = parts
    n = int(np.floor((b - a) / s + 1e-9)) + 1
    return [cast(round(a + k * s, 10)) for k in range(max(n, 0))]


CONFIG_FLAGS = {
    # flag: (config field, type)
    "lr": ("lr", float), "weight-decay": ("weight_decay", float), "epochs": ("epochs", int),
    "layers": ("L", int), "hidden": ("F", int), "batch-size": ("B", int),
    "lambda": ("lam", float), "dropout": ("dropout", float), "negatives": ("K", int),
    "negative-dist": ("negative_dist", str), "seed": ("seed", int),
    "precision": ("precision", str), "threads": ("threads", int),
    "no-mixup-mode": ("no_mixup_mode", str),
}
BOOL_FLAGS = {"no-negative-samples": "no_negative_samples", "no-mixup": "no_mixup",
              "no-label-distill": "no_label_distill",
              "normalize-positives": "normalize_positives"}


def add_config_flags(p, skip=()):
    p.add_argument("--config", help="JSON file of training config fields")
    for flag, (_, typ) in CONFIG_FLAGS.items():
        if flag not in skip:
            p.add_argument(f"--{flag}", type=typ, default=None)
    for flag in BOOL_FLAGS:
        p.add_argument(f"--{flag}", action="store_true", default=None)


def effective_config(args):
    """defaults < config file < flags."""
    d = TrainConfig().to_dict()
    if args.config:
        try:
            d.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from e
    for flag, (field_, _) in CONFIG_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"), None)
        if v is not None:
            d[field_] = v
    for flag, field_ in BOOL_FLAGS.items():
        if getattr(args, flag.replace("-", "_"), None):
            d[field_] = True
    return TrainConfig.from_dict(d).validate()


def open_dataset(path):
    if path is None or not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return load_dataset(path)


def dataset_name(path):
    return Path(path).resolve().name


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    try:
        ds, split = generate_planted(args.per_class, args.classes, args.p_in, args.p_out, args.dim,
                                     args.signal, args.seed, args.train_per_class, args.n_val)
    except ValueError as e:
        raise UsageError(str(e)) from e
    save_dataset(ds, split, args.out)
    print(f"N={ds.num_nodes} E={ds.num_edges} homophily={ds.homophily():.4f} -> {args.out}")
    return 0


def cmd_ingest(args):
    for p in (args.content, args.cites):
        if not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")
    ds, _ = convert_planetoid_raw(args.content, args.cites, args.out, args.per_class,
                                  args.n_val, args.seed)
    print(f"N={ds.num_nodes} E={ds.num_edges} C={ds.num_classes} -> {args.out}")
    return 0


def _run_dir(args, config):
    if args.out:
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path(args.runs) / f"{stamp}-{config.hash()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_grid(text):
    try:
        grid = json.loads(text)
    except json.JSONDecodeError:
        grid = {}
        for part in text.split(";"):
            if not part.strip():
                continue
            key, _, vals = part.partition("=")
            grid[key.strip()] = [float(v) for v in vals.split(",")]
    unknown = set(grid) - {"F", "B", "lam"}
    if unknown:
        raise UsageError(f"grid keys must be among F, B, lam; got {sorted(unknown)}")
    for k in ("F", "B"):
        if k in grid:
            grid[k] = [int(v) for v in grid[k]]
    return grid


def cmd_train(args):
    ds, split = open_dataset(args.data)
    config = effective_config(args)
    out = _run_dir(args, config)
    grid_rows = None
    if args.grid:
        if args.mode != "gsdn":
            raise UsageError("--grid only applies to --mode gsdn")
        config, grid_rows = grid_search(ds, split, config, _parse_grid(args.grid),
                                        seeds=parse_range(args.seeds, int), n_workers=args.jobs)
    params, report = fit_model(args.mode, ds, split, config)
    if args.mode == "gcn":
        save_gcn(params, out / "checkpoint.npz", report.config_hash, {"model": "gcn"})
    else:
        save_checkpoint(params, out / "checkpoint.npz", report.config_hash, {"model": args.mode})
    (out / "metrics.csv").write_text(report.metrics_csv())
    (out / "timing.csv").write_text(report.timing_csv())
    doc = report.to_dict()
    doc["dataset"] = str(Path(args.data).resolve())
    doc["effective_config"] = (mlp_mode(config) if args.mode == "mlp" else config).to_dict()
    if grid_rows is not None:
        doc["grid"] = grid_rows
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    print(f"model={args.mode} best_epoch={report.best_epoch} val_acc={report.best_val_acc:.4f} "
          f"test_acc={report.test_acc:.4f} -> {out}")
    return 0


def _load_any(path, ds):
    expect = {"d": ds.num_features, "C": ds.num_classes}
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    if checkpoint_kind(path) == "gcn":
        return load_gcn(path, expect)[0]
    return load_checkpoint(path, expect)[0]


def _logits(params, ds):
    if isinstance(params, GCNParams):
        dtype = params.tensors["W0"].dtype
        return gcn_forward(params, normalized_adjacency(ds, dtype),
                           np.asarray(ds.features, dtype))
    return predict_logits(params, np.asarray(ds.features, params.tensors["W0"].dtype))


def cmd_evaluate(args):
    ds, split = open_dataset(args.data)
    params = _load_any(args.checkpoint, ds)
    pred = np.argmax(_logits(params, ds), axis=1)
    result = {"checkpoint": str(args.checkpoint), "version": __version__}
    for name in ("train", "val", "test"):
        idx = getattr(split, name)
        result[f"{name}_acc"] = float(np.mean(pred[idx] == ds.labels[idx])) if len(idx) else None
    print(json.dumps(result, sort_keys=True))
    return 0


BENCH_COLUMNS = ("model", "dataset", "N", "E", "L", "F", "median_ms", "iqr_ms", "reps",
                 "threads", "fetch")


def cmd_bench(args):
    ds, _ = open_dataset(args.data)
    threads = args.threads if args.threads is not None else thread_count()
    dtype = DTYPES[args.precision]
    targets = None if args.targets == "all" else [int(t) for t in args.targets.split(",")]
    fetch_target = 0 if targets is None else targets[0]
    rows = []
    if args.checkpoint:
        plans = [(None, _load_any(args.checkpoint, ds))]
    else:
        plans = []
        for L in parse_range(args.layers, int):
            for m in args.models.split(","):
                if m == "gsdn":
                    p = init_params(ds.num_features, args.hidden, L, ds.num_classes, args.seed, dtype)
                elif m == "gcn":
                    p = init_gcn(ds.num_features, args.hidden, L, ds.num_classes, args.seed, dtype)
                else:
                    raise UsageError(f"unknown model {m!r}; use gsdn or gcn")
                plans.append((m, p))
    for m, p in plans:
        kind = "gcn" if isinstance(p, GCNParams) else "gsdn"
        stats = bench_latency(kind, p, ds, targets, args.reps, args.warmup, args.inner, threads)
        fetch = count_fetches(ds, fetch_target, p.L, kind).total
        rows.append({"model": kind, "dataset": dataset_name(args.data), "N": ds.num_nodes,
                     "E": ds.num_edges, "L": p.L, "F": p.F, "median_ms": repr(stats.median_ms),
                     "iqr_ms": repr(stats.iqr_ms), "reps": stats.reps, "threads": stats.threads,
                     "fetch": fetch})
    header = (f"# gsdn {__version__} bench targets={args.targets} warmup={args.warmup} "
              f"inner={args.inner} precision={args.precision} seed={args.seed}\n")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        out.write(header)
        w = csv.DictWriter(out, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_experiment(args):
    from . import diagnostics as dg
    if args.name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.name!r}; valid: {', '.join(EXPERIMENTS)}")
    ds, split = open_dataset(args.data)
    config = effective_config(args)
    seeds = parse_range(args.seeds, int)
    models = tuple(args.models.split(","))
    if args.name == "noise":
        ratios = parse_range(args.ratios, float)
        if any(not 0 <= r <= 1 for r in ratios):
            raise UsageError("noise ratios must lie in [0, 1]")
        table = dg.run_noise_sweep(ds, split, config, ratios, models, seeds, args.jobs)
    elif args.name == "scarcity":
        table = dg.run_label_scarcity_sweep(ds, split, config, parse_range(args.k_values, int),
                                            models, seeds, args.jobs)
    elif args.name == "ablation":
        table = dg.run_ablations(ds, split, config, seeds, n_workers=args.jobs)
    else:
        table = dg.run_sensitivity(ds, split, config, parse_range(args.lambdas, float),
                                   parse_range(args.batches, int), seeds, args.jobs)
    path = table.write(args.out, dataset_name(args.data))
    print(path.read_text(), end="")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    ap = argparse.ArgumentParser(prog="gsdn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"gsdn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a planted-partition dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--signal", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-per-class", type=int, default=20)
    g.add_argument("--n-val", type=int, default=500)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", help="convert a raw .content/.cites citation dump")
    i.add_argument("--content", required=True)
    i.add_argument("--cites", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--per-class", type=int, default=20)
    i.add_argument("--n-val", type=int, default=500)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="train gsdn, mlp or gcn")
    t.add_argument("data")
    t.add_argument("--mode", choices=("gsdn", "mlp", "gcn"), default="gsdn")
    t.add_argument("--out", help="output directory (default runs/<timestamp>-<hash>)")
    t.add_argument("--runs", default="runs")
    t.add_argument("--grid", help='e.g. "F=32,64;B=256;lam=0,0.5" or a JSON object')
    t.add_argument("--seeds", default="0:4", help="grid seeds")
    t.add_argument("--jobs", type=int, default=1)
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy of a checkpoint on each split")
    e.add_argument("data")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="inference latency and neighbourhood fetches")
    b.add_argument("data")
    b.add_argument("--checkpoint")
    b.add_argument("--models", default="gsdn,gcn")
    b.add_argument("--layers", default="1:4")
    b.add_argument("--hidden", type=int, default=16)
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--inner", type=int, default=1)
    b.add_argument("--targets", default="all", help='"all" or comma-separated node ids')
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--precision", choices=tuple(DTYPES), default="float32")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("experiment", help=f"sweeps: {', '.join(EXPERIMENTS)}")
    x.add_argument("name")
    x.add_argument("data")
    x.add_argument("--out", default="results")
    x.add_argument("--seeds", default="0:4")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--models", default="gsdn,mlp,gcn")
    x.add_argument("--ratios", default="0:0.6:0.1")
    x.add_argument("--k-values", default="5,10,15")
    x.add_argument("--lambdas", default="0,0.1,0.3,0.5,0.8,1.0")
    x.add_argument("--batches", default="256,512,1024,2048,4096")
    add_config_flags(x)
    x.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as e:
        print(f"gsdn {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"gsdn {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
