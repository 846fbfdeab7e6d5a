"""Desk-scale comparisons: transform x depth x seed sweeps and pass timings."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, make_rng
from .train import TrainConfig, fit, mean_nll, model_from_config

log = logging.getLogger(__name__)

DEFAULT_TRANSFORMS = ("lrs", "affine")
DEFAULT_DEPTHS = (2, 4)
DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_ITERATIONS = 5000

REPORT_COLUMNS = ("transform", "depth", "seed", "test_nll", "wall_seconds", "status")


@dataclass(frozen=True)
class BenchRow:
    transform: str
    depth: int
    seed: int
    test_nll: float
    wall_seconds: float
    status: str = "ok"

    @property
    def ok(self):
        return self.status == "ok"


@dataclass(frozen=True)
class CellSummary:
    transform: str
    depth: int
    mean: float
    std: float
    n_ok: int
    n_failed: int


def _as_array(ds):
    return np.asarray(getattr(ds, "data", ds), dtype=np.float64)


def run_cell(config: TrainConfig, train, val, test) -> BenchRow:
    """Train one configuration and score its best-validation state on ``test``."""
    t0 = time.perf_counter()
    try:
        model = model_from_config(config, _as_array(train).shape[1])
        fit(model, train, config, val)
        nll = mean_nll(model, _as_array(test))
        if not math.isfinite(nll):
            raise FloatingPointError(f"non-finite test NLL {nll}")
        status = "ok"
    except Exception as exc:  # noqa: BLE001 - a failed cell becomes a flagged row
        log.warning("cell %s/%d/%d failed: %s", config.transform,
                    config.transformation_layers, config.seed, exc)
        nll, status = float("nan"), f"failed: {type(exc).__name__}: {exc}"
    return BenchRow(config.transform, config.transformation_layers, config.seed, nll,
                    time.perf_counter() - t0, status)


def run_comparison(base_config: TrainConfig, train, val, test,
                   transforms=DEFAULT_TRANSFORMS, depths=DEFAULT_DEPTHS, seeds=DEFAULT_SEEDS,
                   workers=1):
    """Train every (transform, depth, seed) cell under the same budget.

    Rows come back in matrix order regardless of ``workers``.  Each cell
    builds its own model, so cells share nothing mutable.
    """
    cells = [base_config.replace(transform=t, transformation_layers=int(d), seed=int(s))
             for t in transforms for d in depths for s in seeds]
    if workers <= 1:
        return [run_cell(c, train, val, test) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_cell(c, train, val, test), cells))


def summarize(rows):
    """Mean and sample standard deviation of test NLL per (transform, depth)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.transform, r.depth), []).append(r)
    out = []
    for (t, d), rs in groups.items():
        vals = [r.test_nll for r in rs if r.ok]
        mean = statistics.fmean(vals) if vals else float("nan")
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0 if vals else float("nan")
        out.append(CellSummary(t, d, mean, std, len(vals), len(rs) - len(vals)))
    return out


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.transform, r.depth, r.seed, repr(r.test_nll), f"{r.wall_seconds:.3f}",
                    r.status])
    return buf.getvalue()


def summary_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("transform", "depth", "mean_test_nll", "std_test_nll", "n_ok", "n_failed"))
    for s in summaries:
        w.writerow([s.transform, s.depth, repr(s.mean), repr(s.std), s.n_ok, s.n_failed])
    return buf.getvalue()


@dataclass(frozen=True)
class TimingReport:
    batch_size: int
    repeats: int
    forward_seconds: float
    inverse_seconds: float

    @property
    def ratio(self):
        """Median inverse time divided by median forward time."""
        return self.inverse_seconds / self.forward_seconds


def _run_stack(model: FlowModel, x, inverse):
    layers = reversed(model.layers) if inverse else model.layers
    for layer in layers:
        x, _ = layer.inverse(x) if inverse else layer.forward(x)
    return x


def time_forward_inverse(model: FlowModel, batch_size=1024, repeats=5, seed=0) -> TimingReport:
    """Median wall-clock of a batched pass through every layer's ``forward``
    versus every layer's ``inverse``.

    For coupling stacks both directions are single passes.  Masked
    autoregressive layers need one conditioner pass per dimension to invert.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    x = make_rng(seed).standard_normal((batch_size, model.dim)) * 0.5
    fwd, inv = [], []
    _run_stack(model, x, inverse=False)  # warm-up
    for _ in range(repeats):
        t0 = time.perf_counter()
        _run_stack(model, x, inverse=False)
        fwd.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        _run_stack(model, x, inverse=True)
        inv.append(time.perf_counter() - t0)
    return TimingReport(batch_size, repeats, statistics.median(fwd), statistics.median(inv))
