"""Monotone linear rational splines.

Each bin ``[x_lo, x_hi]`` is split at ``x_mid = (1 - lam) * x_lo + lam * x_hi``
and interpolated by two homographic pieces ``y = (a x + b) / (c x + d)`` that
match the knot values and derivatives and join with C1 continuity at the
intermediate point.  The bin parameters follow the classical monotone
interpolation recipe with the left weight fixed to one:

    w_hi  = sqrt(d_lo / d_hi)
    y_mid = ((1 - lam) y_lo + lam w_hi y_hi) / ((1 - lam) + lam w_hi)
    w_mid = (lam d_lo + (1 - lam) w_hi d_hi) (x_hi - x_lo) / (y_hi - y_lo)

Outside ``[-B, B]`` the transform is the identity (linear tails with unit
slope), matching the unit boundary derivatives.

Everything here is vectorised over arbitrary leading axes: a spline whose
arrays have shape ``(..., K + 1)`` is evaluated elementwise against inputs of
shape ``(...)``.  The inverse is closed form; no root finding is involved.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import InvalidKnots, ShapeMismatch

LAMBDA_EPS = 0.025
MIN_DERIV = 1e-3
MIN_BIN_FRAC = 1e-3
WIDTH_EPS = 1e-12


@dataclass(frozen=True)
class KnotSpec:
    """Knots, knot derivatives and per-bin lambdas of one or many splines.

    ``xs``, ``ys`` and ``ds`` have shape ``(..., K + 1)``; ``lambdas`` has
    shape ``(..., K)``.  When ``tail_bound`` is set the spline maps
    ``[-B, B]`` onto itself and is the identity outside; when it is ``None``
    the spline is only defined on ``[xs[0], xs[-1]]``.
    """

    xs: np.ndarray
    ys: np.ndarray
    ds: np.ndarray
    lambdas: np.ndarray
    tail_bound: float | None = None

    @property
    def num_bins(self) -> int:
        return self.xs.shape[-1] - 1

    @property
    def batch_shape(self) -> tuple:
        return self.xs.shape[:-1]

    def __getitem__(self, index) -> "KnotSpec":
        return KnotSpec(self.xs[index], self.ys[index], self.ds[index],
                        self.lambdas[index], self.tail_bound)

    def validate(self) -> "KnotSpec":
        K = self.num_bins
        if K < 1:
            raise InvalidKnots("a spline needs at least two knots")
        for name in ("ys", "ds"):
            if getattr(self, name).shape != self.xs.shape:
                raise ShapeMismatch(
                    f"{name} has shape {getattr(self, name).shape}, xs has {self.xs.shape}")
        if self.lambdas.shape != self.xs.shape[:-1] + (K,):
            raise ShapeMismatch(
                f"lambdas has shape {self.lambdas.shape}, expected {self.xs.shape[:-1] + (K,)}")
        for name in ("xs", "ys", "ds", "lambdas"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidKnots(f"{name} contains non-finite values")
        _check_bins(self.xs, self.ys, self.ds)
        if np.any(self.lambdas <= 0.0) or np.any(self.lambdas >= 1.0):
            bad = _first_bad_bin(~((self.lambdas > 0) & (self.lambdas < 1)))
            raise InvalidKnots(f"lambda of bin {bad} is outside (0, 1)")
        if self.tail_bound is not None:
            B = float(self.tail_bound)
            if not B > 0:
                raise InvalidKnots("tail bound must be positive")
            ends = (self.xs[..., 0], self.ys[..., 0], -self.xs[..., -1], -self.ys[..., -1])
            if any(np.any(e != -B) for e in ends):
                raise InvalidKnots(f"end knots must be (-{B}, -{B}) and ({B}, {B})")
            if np.any(self.ds[..., 0] != 1.0) or np.any(self.ds[..., -1] != 1.0):
                raise InvalidKnots("boundary derivatives must equal 1 when tails are used")
        return self


# A single scalar dimension's spline is just an unbatched KnotSpec.
ElementSpline = KnotSpec


def make_spline(xs, ys, ds, lambdas, tail_bound=None) -> KnotSpec:
    """Build and validate a spline from array-likes.

    A scalar ``lambdas`` is shared by every bin.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.ndim == 0:
        lambdas = np.full(xs.shape[:-1] + (xs.shape[-1] - 1,), float(lambdas))
    return KnotSpec(xs, ys, ds, lambdas, tail_bound).validate()


def identity_spline(num_bins: int, tail_bound: float, lam: float = 0.5) -> KnotSpec:
    xs = np.linspace(-tail_bound, tail_bound, num_bins + 1)
    xs[0], xs[-1] = -tail_bound, tail_bound
    return make_spline(xs, xs.copy(), np.ones(num_bins + 1), lam, tail_bound)


def _first_bad_bin(mask):
    return int(np.argwhere(mask)[0][-1])


def _check_bins(xs, ys, ds):
    if np.any(ds <= 0.0):
        raise InvalidKnots(f"non-positive derivative at knot {_first_bad_bin(ds <= 0.0)}")
    dx = np.diff(xs, axis=-1)
    if np.any(dx < WIDTH_EPS):
        raise InvalidKnots(f"degenerate width in bin {_first_bad_bin(dx < WIDTH_EPS)}")
    dy = np.diff(ys, axis=-1)
    if np.any(dy < WIDTH_EPS):
        raise InvalidKnots(f"degenerate height in bin {_first_bad_bin(dy < WIDTH_EPS)}")


@dataclass(frozen=True)
class SplineBinParams:
    k: int
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    delta: float
    lam: float
    w_lo: float
    w_mid: float
    w_hi: float
    y_mid: float


class SplineResult(NamedTuple):
    value: np.ndarray
    log_abs_det: np.ndarray


def derive_bin_params(knots: KnotSpec, k: int, w_lo: float = 1.0) -> SplineBinParams:
    """Parameters of the two rational pieces of bin ``k`` of an unbatched spline."""
    K = knots.num_bins
    if not 0 <= k < K:
        raise IndexError(f"bin {k} out of range for {K} bins")
    if not w_lo > 0:
        raise InvalidKnots(f"bin {k}: w_lo must be positive")
    x_lo, x_hi = float(knots.xs[k]), float(knots.xs[k + 1])
    y_lo, y_hi = float(knots.ys[k]), float(knots.ys[k + 1])
    d_lo, d_hi = float(knots.ds[k]), float(knots.ds[k + 1])
    lam = float(knots.lambdas[k])
    if d_lo <= 0 or d_hi <= 0:
        raise InvalidKnots(f"bin {k}: non-positive derivative ({d_lo}, {d_hi})")
    if x_hi - x_lo < WIDTH_EPS:
        raise InvalidKnots(f"bin {k}: degenerate width {x_hi - x_lo}")
    if y_hi - y_lo < WIDTH_EPS:
        raise InvalidKnots(f"bin {k}: degenerate height {y_hi - y_lo}")
    if not 0 < lam < 1:
        raise InvalidKnots(f"bin {k}: lambda {lam} outside (0, 1)")

    w_hi = np.sqrt(d_lo / d_hi) * w_lo
    y_mid = ((1 - lam) * w_lo * y_lo + lam * w_hi * y_hi) / ((1 - lam) * w_lo + lam * w_hi)
    w_mid = (lam * w_lo * d_lo + (1 - lam) * w_hi * d_hi) * (x_hi - x_lo) / (y_hi - y_lo)
    return SplineBinParams(k, x_lo, x_hi, y_lo, y_hi, x_hi - x_lo, lam,
                           w_lo, float(w_mid), float(w_hi), float(y_mid))


# ---------------------------------------------------------------------------
# vectorised evaluation
# ---------------------------------------------------------------------------

def _search_bins(edges, v):
    """Binary search per row: ``idx`` with ``edges[idx] < v <= edges[idx + 1]``.

    Values on an interior knot fall in the bin to its left; values at or
    below the first knot land in bin 0.
    """
    K = edges.shape[-1] - 1
    lo = np.zeros(v.shape, dtype=np.intp)
    hi = np.full(v.shape, K - 1, dtype=np.intp)
    for _ in range(max(K - 1, 1).bit_length()):
        mid = (lo + hi) // 2
        right = _gather(edges, mid + 1) < v
        lo = np.where(right, mid + 1, lo)
        hi = np.where(right, hi, mid)
    return lo


def _gather(arr, idx):
    return np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]


def _broadcast(knots: KnotSpec, v):
    v = np.asarray(v, dtype=np.float64)
    shape = np.broadcast_shapes(knots.batch_shape, v.shape)
    K = knots.num_bins
    xs = np.broadcast_to(knots.xs, shape + (K + 1,))
    ys = np.broadcast_to(knots.ys, shape + (K + 1,))
    ds = np.broadcast_to(knots.ds, shape + (K + 1,))
    lam = np.broadcast_to(knots.lambdas, shape + (K,))
    return xs, ys, ds, lam, np.broadcast_to(v, shape)


class _Bin(NamedTuple):
    idx: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    d_lo: np.ndarray
    d_hi: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    dy: np.ndarray
    s: np.ndarray  # w_hi with w_lo = 1
    A: np.ndarray
    r1: np.ndarray  # y_mid - y_lo
    r2: np.ndarray  # y_hi - y_mid
    P: np.ndarray
    w_m: np.ndarray


def _bin_terms(xs, ys, ds, lam_all, idx) -> _Bin:
    x_lo, x_hi = _gather(xs, idx), _gather(xs, idx + 1)
    y_lo, y_hi = _gather(ys, idx), _gather(ys, idx + 1)
    d_lo, d_hi = _gather(ds, idx), _gather(ds, idx + 1)
    lam = _gather(lam_all, idx)
    delta = x_hi - x_lo
    dy = y_hi - y_lo
    s = np.sqrt(d_lo / d_hi)
    A = (1.0 - lam) + lam * s
    r1 = lam * s * dy / A
    r2 = (1.0 - lam) * dy / A
    P = lam * d_lo + (1.0 - lam) * s * d_hi
    w_m = P * delta / dy
    return _Bin(idx, x_lo, x_hi, y_lo, y_hi, d_lo, d_hi, lam, delta, dy, s, A, r1, r2, P, w_m)


def _inside(knots: KnotSpec, v):
    if knots.tail_bound is None:
        return np.ones(v.shape, dtype=bool)
    return np.abs(v) <= knots.tail_bound


class _ForwardCache(NamedTuple):
    b: _Bin
    inside: np.ndarray
    left: np.ndarray
    phi: np.ndarray
    p1: np.ndarray
    den1: np.ndarray
    q1: np.ndarray
    p2: np.ndarray
    den2: np.ndarray
    q2: np.ndarray
    shape: tuple
    K: int


def _forward_core(knots: KnotSpec, x, idx=None):
    xs, ys, ds, lam_all, x = _broadcast(knots, x)
    inside = _inside(knots, x)
    if knots.tail_bound is None and not np.all((x >= xs[..., 0]) & (x <= xs[..., -1])):
        raise ValueError("input outside the spline domain and no tails are defined")
    xc = np.where(inside, x, 0.0) if knots.tail_bound is not None else x
    if idx is None:
        idx = _search_bins(xs, xc)
    b = _bin_terms(xs, ys, ds, lam_all, idx)
    phi = np.clip((xc - b.x_lo) / b.delta, 0.0, 1.0)
    left = phi <= b.lam

    p1 = np.minimum(phi, b.lam)
    den1 = b.lam - p1 + b.w_m * p1
    q1 = b.w_m * p1 / den1
    v1 = b.y_lo + b.r1 * q1
    ld1 = np.log(b.lam) + np.log(b.w_m) + np.log(b.r1) - 2.0 * np.log(den1)

    p2 = np.maximum(phi, b.lam)
    den2 = b.w_m * (1.0 - p2) + b.s * (p2 - b.lam)
    q2 = b.w_m * (1.0 - p2) / den2
    v2 = b.y_hi - b.r2 * q2
    ld2 = np.log1p(-b.lam) + np.log(b.w_m) + np.log(b.s) + np.log(b.r2) - 2.0 * np.log(den2)

    value = np.where(inside, np.where(left, v1, v2), x)
    lad = np.where(inside, np.where(left, ld1, ld2) - np.log(b.delta), 0.0)
    cache = _ForwardCache(b, inside, left, phi, p1, den1, q1, p2, den2, q2,
                          x.shape, knots.num_bins)
    return value, lad, cache


def forward(spline: KnotSpec, x) -> SplineResult:
    """Evaluate the spline and ``log|dy/dx|`` at ``x``."""
    value, lad, _ = _forward_core(spline, x)
    return SplineResult(value, lad)


def _inverse_core(knots: KnotSpec, y):
    xs, ys, ds, lam_all, y = _broadcast(knots, y)
    inside = _inside(knots, y)
    if knots.tail_bound is None and not np.all((y >= ys[..., 0]) & (y <= ys[..., -1])):
        raise ValueError("input outside the spline range and no tails are defined")
    yc = np.where(inside, y, 0.0) if knots.tail_bound is not None else y
    idx = _search_bins(ys, yc)
    b = _bin_terms(xs, ys, ds, lam_all, idx)
    # offsets inside the bin are taken from y_lo so that y_mid is never
    # rounded to an absolute position
    t = np.clip(yc - b.y_lo, 0.0, b.r1 + b.r2)
    left = t <= b.r1

    # first piece on [y_lo, y_mid]
    a1 = np.minimum(t, b.r1)
    c1 = b.r1 - a1
    den1 = a1 + b.w_m * c1
    phi1 = b.lam * a1 / den1
    ld1 = np.log(b.lam) + np.log(b.w_m) + np.log(b.r1) - 2.0 * np.log(den1)

    # second piece on [y_mid, y_hi]
    c2 = np.maximum(t, b.r1) - b.r1
    a2 = b.r2 - c2
    den2 = b.s * a2 + b.w_m * c2
    phi2 = (b.lam * b.s * a2 + b.w_m * c2) / den2
    ld2 = np.log1p(-b.lam) + np.log(b.w_m) + np.log(b.s) + np.log(b.r2) - 2.0 * np.log(den2)

    phi = np.where(left, phi1, phi2)
    value = np.where(inside, b.x_lo + b.delta * phi, y)
    lad = np.where(inside, np.where(left, ld1, ld2) + np.log(b.delta), 0.0)
    return value, lad, idx


def inverse(spline: KnotSpec, y) -> SplineResult:
    """Closed-form inverse and its ``log|dx/dy|``."""
    value, lad, _ = _inverse_core(spline, y)
    return SplineResult(value, lad)


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------

class SplineGradients(NamedTuple):
    x: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    ds: np.ndarray
    lambdas: np.ndarray


def _scatter(idx, lo_vals, hi_vals, width):
    out = np.zeros(idx.shape + (width,))
    np.put_along_axis(out, idx[..., None], lo_vals[..., None], axis=-1)
    if hi_vals is not None:
        # idx + 1 never collides with idx, so plain assignment is enough
        np.put_along_axis(out, (idx + 1)[..., None], hi_vals[..., None], axis=-1)
    return out


def _forward_vjp(c: _ForwardCache, g_v, g_l):
    """Reverse pass of ``_forward_core`` (gradients of value and log-det)."""
    b = c.b
    g_v = np.broadcast_to(np.asarray(g_v, dtype=np.float64), c.shape)
    g_l = np.broadcast_to(np.asarray(g_l, dtype=np.float64), c.shape)
    m1 = c.inside & c.left
    m2 = c.inside & ~c.left
    G1v, G1l = np.where(m1, g_v, 0.0), np.where(m1, g_l, 0.0)
    G2v, G2l = np.where(m2, g_v, 0.0), np.where(m2, g_l, 0.0)
    lam, s, w_m, dy, A, delta = b.lam, b.s, b.w_m, b.dy, b.A, b.delta

    # first piece: value = y_lo + r1 q1, q1 = w_m p / den1,
    # logdet = log lam + log w_m + log r1 - 2 log den1 - log delta
    bar_ylo = G1v.copy()
    bar_r1 = G1v * c.q1 + G1l / b.r1
    bar_q1 = G1v * b.r1
    bar_wm = bar_q1 * c.p1 / c.den1 + G1l / w_m
    bar_phi = bar_q1 * w_m / c.den1
    bar_den1 = -bar_q1 * c.q1 / c.den1 - 2.0 * G1l / c.den1
    bar_lam = G1l / lam
    bar_delta = -(G1l + G2l) / delta
    bar_lam += bar_den1
    bar_phi += bar_den1 * (w_m - 1.0)
    bar_wm += bar_den1 * c.p1

    # second piece: value = y_hi - r2 q2, q2 = w_m (1 - p) / den2
    bar_yhi = G2v.copy()
    bar_r2 = -G2v * c.q2 + G2l / b.r2
    bar_q2 = -G2v * b.r2
    bar_wm += bar_q2 * (1.0 - c.p2) / c.den2 + G2l / w_m
    bar_phi -= bar_q2 * w_m / c.den2
    bar_den2 = -bar_q2 * c.q2 / c.den2 - 2.0 * G2l / c.den2
    bar_lam -= G2l / (1.0 - lam)
    bar_s = G2l / s
    bar_wm += bar_den2 * (1.0 - c.p2)
    bar_phi += bar_den2 * (s - w_m)
    bar_s += bar_den2 * (c.p2 - lam)
    bar_lam -= bar_den2 * s

    # phi = (x - x_lo) / delta
    bar_x = bar_phi / delta
    bar_xlo = -bar_phi / delta
    bar_delta -= bar_phi * c.phi / delta
    # w_m = P delta / dy
    bar_P = bar_wm * delta / dy
    bar_delta += bar_wm * b.P / dy
    bar_dy = -bar_wm * w_m / dy
    bar_lam += bar_P * (b.d_lo - s * b.d_hi)
    bar_dlo = bar_P * lam
    bar_s += bar_P * (1.0 - lam) * b.d_hi
    bar_dhi = bar_P * (1.0 - lam) * s
    # r1 = lam s dy / A, r2 = (1 - lam) dy / A, A = 1 - lam + lam s
    bar_lam += (bar_r1 * s - bar_r2) * dy / A
    bar_s += bar_r1 * lam * dy / A
    bar_dy += (bar_r1 * lam * s + bar_r2 * (1.0 - lam)) / A
    bar_A = -(bar_r1 * b.r1 + bar_r2 * b.r2) / A
    bar_lam += bar_A * (s - 1.0)
    bar_s += bar_A * lam
    # s = sqrt(d_lo / d_hi)
    bar_dlo += bar_s * s / (2.0 * b.d_lo)
    bar_dhi -= bar_s * s / (2.0 * b.d_hi)
    bar_xhi = bar_delta
    bar_xlo -= bar_delta
    bar_yhi += bar_dy
    bar_ylo -= bar_dy

    K = c.K
    grad_x = np.where(c.inside, bar_x, g_v)
    return SplineGradients(
        x=grad_x,
        xs=_scatter(b.idx, bar_xlo, bar_xhi, K + 1),
        ys=_scatter(b.idx, bar_ylo, bar_yhi, K + 1),
        ds=_scatter(b.idx, bar_dlo, bar_dhi, K + 1),
        lambdas=_scatter(b.idx, bar_lam, None, K),
    )


def spline_gradient(spline: KnotSpec, x, grad_value, grad_logdet) -> SplineGradients:
    """Vector-Jacobian product of :func:`forward` w.r.t. ``x`` and all knot data.

    Returned arrays have the broadcast batch shape of ``spline`` and ``x``.
    Tail inputs get ``grad_value`` for ``x`` and exactly zero elsewhere.
    """
    _, _, cache = _forward_core(spline, x)
    return _forward_vjp(cache, grad_value, grad_logdet)


def _dlogdet_dx(c: _ForwardCache):
    b = c.b
    slope = np.where(c.left, (b.w_m - 1.0) / c.den1, (b.s - b.w_m) / c.den2)
    return np.where(c.inside, -2.0 * slope / b.delta, 0.0)


def inverse_gradient(spline: KnotSpec, y, grad_value, grad_logdet) -> SplineGradients:
    """Vector-Jacobian product of :func:`inverse`.

    Uses the implicit relation ``forward(inverse(y)) = y`` so the analytic
    forward derivatives are reused: with ``x = inverse(y)`` and
    ``L = -log f'(x)``, the upstream gradients are pulled back to a forward
    VJP evaluated at ``x``.
    """
    x, _, idx = _inverse_core(spline, y)
    _, lad_f, cache = _forward_core(spline, x, idx=idx)
    g_v = np.broadcast_to(np.asarray(grad_value, dtype=np.float64), cache.shape)
    g_l = np.broadcast_to(np.asarray(grad_logdet, dtype=np.float64), cache.shape)
    coef = g_v - g_l * _dlogdet_dx(cache)
    inv_slope = np.exp(-lad_f)
    grads = _forward_vjp(cache, -coef * inv_slope, -g_l)
    grad_y = np.where(cache.inside, coef * inv_slope, g_v)
    return grads._replace(x=grad_y)


# ---------------------------------------------------------------------------
# unconstrained parameterisation
# ---------------------------------------------------------------------------

def raw_size(num_bins: int) -> int:
    return 4 * num_bins - 1


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _deriv_shift(min_deriv):
    # zero raw input maps to a derivative of exactly one
    return np.log(np.expm1(1.0 - min_deriv))


def _resolve_min_bin(num_bins, tail_bound, min_bin):
    if min_bin is None:
        min_bin = MIN_BIN_FRAC * 2.0 * tail_bound / num_bins
    if min_bin * num_bins >= 2.0 * tail_bound:
        raise InvalidKnots("min_bin too large for the number of bins")
    return min_bin


def _split_raw(raw, num_bins):
    raw = np.asarray(raw, dtype=np.float64)
    K = num_bins
    if raw.shape[-1:] != (raw_size(K),):
        raise ShapeMismatch(
            f"raw spline parameters have shape {raw.shape}, expected last axis {raw_size(K)}")
    return raw[..., :K], raw[..., K:2 * K], raw[..., 2 * K:3 * K - 1], raw[..., 3 * K - 1:]


def _cumulative_knots(sizes, tail_bound):
    inner = -tail_bound + np.cumsum(sizes[..., :-1], axis=-1)
    lo = np.full(sizes.shape[:-1] + (1,), -tail_bound)
    hi = np.full(sizes.shape[:-1] + (1,), float(tail_bound))
    return np.concatenate([lo, inner, hi], axis=-1)


def squash_raw_params(raw, num_bins: int, tail_bound: float, min_bin=None,
                      min_deriv: float = MIN_DERIV, lambda_eps: float = LAMBDA_EPS,
                      shared_lambda: bool = False) -> KnotSpec:
    """Map ``4K - 1`` unconstrained reals per spline to valid knot data.

    Layout of the last axis is ``[K widths | K heights | K - 1 interior
    derivatives | K lambdas]``.  Widths and heights are softmax-normalised with
    a floor of ``min_bin``; interior derivatives use a shifted softplus floored
    at ``min_deriv`` (zero maps to one); lambdas use a logistic rescaled into
    ``[lambda_eps, 1 - lambda_eps]``.  With ``shared_lambda`` only the first
    lambda entry is used, for every bin.
    """
    K = num_bins
    rw, rh, rd, rl = _split_raw(raw, K)
    min_bin = _resolve_min_bin(K, tail_bound, min_bin)
    scale = 2.0 * tail_bound - K * min_bin
    xs = _cumulative_knots(min_bin + scale * _softmax(rw), tail_bound)
    ys = _cumulative_knots(min_bin + scale * _softmax(rh), tail_bound)
    ones = np.ones(rd.shape[:-1] + (1,))
    inner = min_deriv + np.logaddexp(0.0, rd + _deriv_shift(min_deriv))
    ds = np.concatenate([ones, inner, ones], axis=-1)
    if shared_lambda:
        rl = np.broadcast_to(rl[..., :1], rl.shape)
    lambdas = lambda_eps + (1.0 - 2.0 * lambda_eps) * expit(rl)
    return KnotSpec(xs, ys, ds, lambdas, float(tail_bound))


def _softmax_cumsum_vjp(r, g_knots, scale):
    K = r.shape[-1]
    sm = _softmax(r)
    # knots[k] = -B + sum_{j<k} size_j for interior k = 1..K-1
    g_inner = g_knots[..., 1:K]
    tail_sums = np.cumsum(g_inner[..., ::-1], axis=-1)[..., ::-1]
    g_size = np.concatenate([tail_sums, np.zeros(r.shape[:-1] + (1,))], axis=-1)
    g_sm = scale * g_size
    return sm * (g_sm - np.sum(g_sm * sm, axis=-1, keepdims=True))


def squash_gradient(raw, grads: SplineGradients, num_bins: int, tail_bound: float,
                    min_bin=None, min_deriv: float = MIN_DERIV,
                    lambda_eps: float = LAMBDA_EPS, shared_lambda: bool = False):
    """Vector-Jacobian product of :func:`squash_raw_params`.

    ``grads`` carries upstream gradients for ``xs``, ``ys``, ``ds`` and
    ``lambdas`` (the ``x`` field is ignored).  Gradients on the fixed end
    knots and boundary derivatives are dropped since those are constants.
    """
    K = num_bins
    rw, rh, rd, rl = _split_raw(raw, K)
    for name in ("xs", "ys", "ds"):
        if getattr(grads, name).shape != rw.shape[:-1] + (K + 1,):
            raise ShapeMismatch(
                f"gradient for {name} has shape {getattr(grads, name).shape}, "
                f"expected {rw.shape[:-1] + (K + 1,)}")
    if grads.lambdas.shape != rl.shape:
        raise ShapeMismatch(f"gradient for lambdas has shape {grads.lambdas.shape}, "
                            f"expected {rl.shape}")
    min_bin = _resolve_min_bin(K, tail_bound, min_bin)
    scale = 2.0 * tail_bound - K * min_bin
    g_w = _softmax_cumsum_vjp(rw, grads.xs, scale)
    g_h = _softmax_cumsum_vjp(rh, grads.ys, scale)
    g_d = grads.ds[..., 1:K] * expit(rd + _deriv_shift(min_deriv))
    if shared_lambda:
        sig = expit(rl[..., :1])
        g0 = np.sum(grads.lambdas, axis=-1, keepdims=True) * (1.0 - 2.0 * lambda_eps) * sig * (1.0 - sig)
        g_l = np.concatenate([g0, np.zeros(rl.shape[:-1] + (K - 1,))], axis=-1)
    else:
        sig = expit(rl)
        g_l = grads.lambdas * (1.0 - 2.0 * lambda_eps) * sig * (1.0 - sig)
    return np.concatenate([g_w, g_h, g_d, g_l], axis=-1)


@dataclass(frozen=True)
class SplineSettings:
    """Hyperparameters shared by every spline of a layer."""

    num_bins: int
    tail_bound: float
    min_bin: float | None = None
    min_deriv: float = MIN_DERIV
    lambda_eps: float = LAMBDA_EPS
    shared_lambda: bool = False

    @property
    def raw_size(self) -> int:
        return raw_size(self.num_bins)

    def squash_kwargs(self) -> dict:
        return dict(tail_bound=self.tail_bound, min_bin=self.min_bin, min_deriv=self.min_deriv,
                    lambda_eps=self.lambda_eps, shared_lambda=self.shared_lambda)

    def squash(self, raw) -> KnotSpec:
        return squash_raw_params(raw, self.num_bins, **self.squash_kwargs())
