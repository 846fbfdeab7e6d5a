"""Command-line interface.

Subcommands::

    lrsflow train CONFIG.json --data SPEC --out DIR
    lrsflow train --manifest DIR/manifest.json --out DIR2
    lrsflow eval CHECKPOINT [--data SPEC] [--split test]
    lrsflow sample CHECKPOINT --n N --seed S --out samples.csv
    lrsflow density-grid CHECKPOINT --range A B --steps M --out grid.csv|grid.pgm
    lrsflow spline-plot --knots knots.json --lambda 0.3 --lambda 0.7 --out curves.csv
    lrsflow bench CONFIG.json --data SPEC --out report.csv
    lrsflow timing CHECKPOINT [--batch-size N] [--repeats R]

A data SPEC is ``generator:<name>`` (rings, checkerboard, two_moons, normal),
``image:<file.pgm>`` or a path to a numeric CSV file.

Exit codes: 0 success, 1 configuration/data/usage errors, 2 non-finite loss.
Log verbosity comes from the ``LRSFLOW_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``, ...; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import bench as bench_mod
from . import spline as sp
from .checkpoint import Checkpoint
from .data import GENERATORS, image_density, load_csv, split_dataset, write_pgm
from .errors import LRSFlowError, NonFiniteLoss
from .train import TrainConfig, fit, mean_nll, model_from_config, nll_with_stderr

log = logging.getLogger("lrsflow")

CHECKPOINT_NAME = "checkpoint.lrsf"
LOSS_NAME = "loss.csv"
MANIFEST_NAME = "manifest.json"


class UsageError(LRSFlowError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("LRSFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def read_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    return TrainConfig.from_dict(raw)


def resolve_data(spec: str, cfg: TrainConfig):
    """Return ``(train, val, test)`` datasets for a data SPEC under ``cfg``."""
    vf, tf, seed = cfg.validation_fraction, cfg.test_fraction, cfg.seed
    if spec.startswith("generator:"):
        name = spec.split(":", 1)[1]
        if name not in GENERATORS:
            raise UsageError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
        return split_dataset(GENERATORS[name](cfg.num_samples, seed), vf, tf, seed)
    if spec.startswith("image:") or spec.lower().endswith(".pgm"):
        path = spec.split(":", 1)[1] if spec.startswith("image:") else spec
        return split_dataset(image_density(path, cfg.num_samples, seed), vf, tf, seed)
    return load_csv(spec, None, vf, tf, seed)


def data_hash(splits) -> str:
    h = hashlib.sha256()
    for ds in splits:
        h.update(ds.digest().encode("ascii"))
    return h.hexdigest()


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _load_checkpoint(path):
    ckpt = Checkpoint.load(path)
    return ckpt, ckpt.to_model()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    expected_hash = None
    if args.manifest:
        try:
            with open(args.manifest) as fh:
                manifest = json.load(fh)
            cfg = TrainConfig.from_dict(manifest["config"])
            spec = args.data or manifest["data"]
            expected_hash = manifest["data_hash"]
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot use manifest {args.manifest}: {exc}") from exc
    else:
        if not args.config or not args.data:
            raise UsageError("train needs CONFIG and --data, or --manifest")
        cfg = read_config(args.config)
        spec = args.data
    train, val, test = resolve_data(spec, cfg)
    digest = data_hash((train, val, test))
    if expected_hash is not None and digest != expected_hash:
        raise UsageError(f"data hash {digest[:12]} does not match manifest {expected_hash[:12]}")
    os.makedirs(args.out, exist_ok=True)
    model = model_from_config(cfg, train.dim)
    log.info("training %d parameters on %d rows (%s)", model.num_parameters(), len(train), spec)
    try:
        report = fit(model, train, cfg, val)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    test_nll = mean_nll(model, test.data) if len(test) else float("nan")
    stats = None
    if train.mean is not None:
        stats = {"mean": train.mean.tolist(), "std": train.std.tolist(),
                 "columns": list(train.columns)}
    ckpt = Checkpoint.from_model(model, cfg, optimizer=report.optimizer,
                                 rng_state=report.rng_state, best_val_nll=report.best_val_nll,
                                 data_stats=stats, extra={"data": spec, "data_hash": digest})
    ckpt.save(os.path.join(args.out, CHECKPOINT_NAME))
    _write_text(os.path.join(args.out, LOSS_NAME), report.history_csv())
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rng": {"bit_generator": "Philox", "seed": cfg.seed},
        "data": spec,
        "data_hash": digest,
        "rows": {"train": len(train), "val": len(val), "test": len(test)},
        "best_val_nll": report.best_val_nll,
        "best_iteration": report.best_iteration,
        "test_nll": test_nll,
        "version": __version__,
    }
    _write_text(os.path.join(args.out, MANIFEST_NAME),
                json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"best_val_nll={report.best_val_nll!r} test_nll={test_nll!r}")
    return 0


def cmd_eval(args) -> int:
    ckpt, model = _load_checkpoint(args.checkpoint)
    spec = args.data or ckpt.extra.get("data")
    if not spec:
        raise UsageError("checkpoint does not record its data; pass --data")
    splits = dict(zip(("train", "val", "test"), resolve_data(spec, ckpt.config)))
    ds = splits[args.split]
    if ds.dim != model.dim:
        raise UsageError(f"data has {ds.dim} columns but the model expects {model.dim}")
    if len(ds) == 0:
        raise UsageError(f"the {args.split} split is empty")
    nll, se = nll_with_stderr(model, ds.data)
    print(f"nll_nats={nll!r} stderr={se!r}")
    return 0


def cmd_sample(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    ckpt, model = _load_checkpoint(args.checkpoint)
    x = model.sample(args.n, args.seed) if args.n else np.zeros((0, model.dim))
    stats = ckpt.data_stats
    if args.original_units and stats:
        x = x * np.asarray(stats["std"]) + np.asarray(stats["mean"])
    columns = (stats or {}).get("columns") or [f"x{i}" for i in range(model.dim)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in x:
            w.writerow([repr(float(v)) for v in row])
    return 0


def density_grid(model, lo, hi, steps):
    """Densities at the ``steps x steps`` cell centres of ``[lo, hi]^2``.

    Returns ``(centres, density)`` with ``density[i, j]`` at
    ``(centres[j], centres[i])`` and the Riemann-sum integral.
    """
    h = (hi - lo) / steps
    c = lo + (np.arange(steps) + 0.5) * h
    gx, gy = np.meshgrid(c, c)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dens = np.concatenate([np.exp(model.log_prob(pts[i:i + 65536]))
                           for i in range(0, len(pts), 65536)]).reshape(steps, steps)
    return c, dens, float(dens.sum() * h * h)


def cmd_density_grid(args) -> int:
    lo, hi = args.range
    if not hi > lo:
        raise UsageError("--range needs A < B")
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    _, model = _load_checkpoint(args.checkpoint)
    if model.dim != 2:
        raise UsageError(f"density grids need a 2-D model, this one has D={model.dim}")
    c, dens, integral = density_grid(model, lo, hi, args.steps)
    if args.out.lower().endswith(".pgm"):
        top = dens.max()
        pix = np.zeros_like(dens) if not top > 0 else np.round(255.0 * dens / top)
        write_pgm(args.out, pix[::-1].astype(np.uint8))
    else:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("x", "y", "density"))
            for i, y in enumerate(c):
                for j, x in enumerate(c):
                    w.writerow((repr(float(x)), repr(float(y)), repr(float(dens[i, j]))))
    print(f"integral={integral!r}")
    return 0


def spline_curves(xs, ys, ds, lambdas, points=201):
    """Rows ``(lambda, x, y, dy/dx)`` on a dense grid that includes every knot."""
    xs = np.asarray(xs, dtype=np.float64)
    grid = np.union1d(np.linspace(xs[0], xs[-1], points), xs)
    rows = []
    for lam in lambdas:
        spline = sp.make_spline(xs, ys, ds, lam)
        res = sp.forward(spline, grid)
        rows.extend(zip([lam] * len(grid), grid, res.value, np.exp(res.log_abs_det)))
    return rows


def cmd_spline_plot(args) -> int:
    try:
        with open(args.knots) as fh:
            knots = json.load(fh)
        xs, ys, ds = knots["xs"], knots["ys"], knots["ds"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"knots file must be JSON with xs, ys and ds: {exc}") from exc
    lambdas = args.lam or [knots.get("lambda", 0.5)]
    for lam in lambdas:
        if not 0.0 < lam < 1.0:
            raise UsageError(f"lambda must lie strictly between 0 and 1, got {lam}")
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    rows = spline_curves(xs, ys, ds, lambdas, args.points)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lambda", "x", "y", "dydx"))
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    return 0


def cmd_bench(args) -> int:
    cfg = read_config(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    train, val, test = resolve_data(args.data, cfg)
    rows = bench_mod.run_comparison(cfg, train, val, test, args.transforms, args.depths,
                                    args.seeds, workers=args.workers)
    _write_text(args.out, bench_mod.report_csv(rows))
    summary = bench_mod.summarize(rows)
    if args.summary:
        _write_text(args.summary, bench_mod.summary_csv(summary))
    for s in summary:
        print(f"transform={s.transform} depth={s.depth} mean_test_nll={s.mean!r} "
              f"std={s.std!r} failed={s.n_failed}")
    return 0


def cmd_timing(args) -> int:
    _, model = _load_checkpoint(args.checkpoint)
    rep = bench_mod.time_forward_inverse(model, args.batch_size, args.repeats)
    print(f"forward_s={rep.forward_seconds!r} inverse_s={rep.inverse_seconds!r} "
          f"ratio={rep.ratio!r}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="lrsflow", description="Linear rational spline normalizing flows.")
    p.add_argument("--version", action="version", version=f"lrsflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a flow and write checkpoint, loss CSV and manifest")
    t.add_argument("config", nargs="?", help="JSON training config")
    t.add_argument("--data", help="generator:<name>, image:<file.pgm> or a CSV path")
    t.add_argument("--manifest", help="rerun from a previous run's manifest.json")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print test NLL in nats with its standard error")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="data spec (defaults to the training data)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples to CSV")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--original-units", action="store_true",
                   help="undo CSV standardisation before writing")
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("density-grid", help="evaluate the density on a square grid")
    g.add_argument("checkpoint")
    g.add_argument("--range", nargs=2, type=float, metavar=("A", "B"), required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--out", required=True, help=".csv or .pgm")
    g.set_defaults(func=cmd_density_grid)

    k = sub.add_parser("spline-plot", help="dense curves of a knot spline for several lambdas")
    k.add_argument("--knots", required=True, help='JSON {"xs": [...], "ys": [...], "ds": [...]}')
    k.add_argument("--lambda", dest="lam", type=float, action="append")
    k.add_argument("--points", type=int, default=201)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_spline_plot)

    b = sub.add_parser("bench", help="transform x depth x seed comparison")
    b.add_argument("config")
    b.add_argument("--data", required=True)
    b.add_argument("--transforms", nargs="+", default=list(bench_mod.DEFAULT_TRANSFORMS),
                   choices=("lrs", "affine"))
    b.add_argument("--depths", nargs="+", type=int, default=list(bench_mod.DEFAULT_DEPTHS))
    b.add_argument("--seeds", nargs="+", type=int, default=list(bench_mod.DEFAULT_SEEDS))
    b.add_argument("--iterations", type=int)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True)
    b.add_argument("--summary")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("timing", help="median forward vs inverse pass time")
    m.add_argument("checkpoint")
    m.add_argument("--batch-size", type=int, default=1024)
    m.add_argument("--repeats", type=int, default=5)
    m.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LRSFlowError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
