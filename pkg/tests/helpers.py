"""Numerical helpers shared by the test modules."""
import numpy as np

from lrsflow import spline as sp
from lrsflow.flow import make_rng


def random_spline(rng, num_bins, tail_bound, batch=(), scale=1.0, **kw):
    raw = scale * rng.standard_normal(batch + (sp.raw_size(num_bins),))
    return sp.squash_raw_params(raw, num_bins, tail_bound, **kw)


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Finite-difference Jacobian of a map R^D -> R^D at a single point."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def perturb(model, scale, seed):
    rng = make_rng(seed)
    for p in model.parameters():
        p.data += scale * rng.standard_normal(p.data.shape)
    return model
