"""Invertible layers, base distributions and the flow model.

Layers are stored in generation order (base sample -> data).  Every layer
has ``forward`` and ``inverse`` methods and an ``orientation`` tag saying
which of the two runs in the generation direction:

* ``"generative"`` layers (couplings, permutations) map base -> data with
  ``forward``; density evaluation calls ``inverse``.
* ``"normalizing"`` layers (LU mixing, masked autoregressive splines) map
  data -> base with ``forward``; sampling calls ``inverse``.

Both methods return ``(output, log_det)`` where ``log_det`` is
``log|det d output / d input|`` per row, so :meth:`FlowModel.normalize`
simply adds the log-dets of whichever method it called.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from . import spline as sp
from .conditioner import MadeConditioner, ResNetConditioner
from .errors import ShapeMismatch


def make_rng(seed):
    """Seeded counter-based generator used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(seed))


def _check_width(t, dim, who):
    if t.ndim != 2 or t.shape[1] != dim:
        raise ShapeMismatch(f"{who}: expected a batch of width {dim}, got shape {t.shape}")


def _zeros_logdet(n):
    return ad.Tensor(np.zeros(n))


class Layer:
    orientation = "generative"
    kind = "layer"

    def __init__(self, dim):
        self.dim = dim
        self.params = {}

    def parameters(self):
        return list(self.params.values())

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "orientation": self.orientation}


class _SplitMixin:
    def _init_split(self, dim, parity):
        if dim < 2:
            raise ShapeMismatch("coupling layers need at least two dimensions")
        self.parity = int(parity)
        self.split = math.ceil(dim / 2)
        perm = np.arange(dim)[::-1] if self.parity else np.arange(dim)
        self.idx1 = perm[:self.split].copy()
        self.idx2 = perm[self.split:].copy()
        self.inv_perm = np.argsort(perm)

    def _join(self, a, b):
        return ad.take(ad.concat([a, b]), self.inv_perm)


class SplineCouplingLayer(_SplitMixin, Layer):
    """Coupling layer built from linear rational splines.

    ``x1 = g_phi(z1)`` with free per-dimension parameters ``phi`` and
    ``x2 = g_theta(x1)(z2)`` with parameters from a residual conditioner.
    With ``transform_first=False`` the first split is passed through.
    """

    kind = "spline_coupling"

    def __init__(self, dim, settings: sp.SplineSettings, parity=0, hidden_features=64,
                 num_blocks=2, dropout_p=0.0, transform_first=True, rng=None):
        Layer.__init__(self, dim)
        self._init_split(dim, parity)
        self.settings = settings
        self.transform_first = transform_first
        P = settings.raw_size
        if transform_first:
            self.params["phi"] = ad.Tensor(np.zeros((self.split, P)), True)
        self.conditioner = ResNetConditioner(self.split, (dim - self.split) * P,
                                             hidden_features, num_blocks, dropout_p, rng)
        for k, t in self.conditioner.params.items():
            self.params[f"conditioner.{k}"] = t

    def describe(self):
        d = super().describe()
        d.update(parity=self.parity, transform_first=self.transform_first,
                 hidden_features=self.conditioner.hidden_features,
                 num_blocks=self.conditioner.num_blocks, dropout_p=self.conditioner.dropout_p)
        return d

    def _theta(self, x1, rng):
        raw = self.conditioner(x1, rng)
        return ad.reshape(raw, (x1.shape[0], self.dim - self.split, self.settings.raw_size))

    def _first(self, v, inverse):
        if not self.transform_first:
            return v, _zeros_logdet(v.shape[0])
        out, ld = ad.spline_node(self.params["phi"], v, self.settings, inverse=inverse)
        return out, ad.sum(ld, axis=-1)

    def forward(self, z, rng=None):
        z = ad.as_tensor(z)
        _check_width(z, self.dim, "coupling forward")
        x1, ld1 = self._first(ad.take(z, self.idx1), inverse=False)
        x2, ld2 = ad.spline_node(self._theta(x1, rng), ad.take(z, self.idx2), self.settings)
        return self._join(x1, x2), ad.add(ld1, ad.sum(ld2, axis=-1))

    def inverse(self, x, rng=None):
        x = ad.as_tensor(x)
        _check_width(x, self.dim, "coupling inverse")
        x1 = ad.take(x, self.idx1)
        z2, ld2 = ad.spline_node(self._theta(x1, rng), ad.take(x, self.idx2), self.settings,
                                 inverse=True)
        z1, ld1 = self._first(x1, inverse=True)
        return self._join(z1, z2), ad.add(ld1, ad.sum(ld2, axis=-1))


class AffineCouplingLayer(_SplitMixin, Layer):
    """Real NVP style baseline: ``x2 = z2 * exp(s(x1)) + t(x1)``."""

    kind = "affine_coupling"

    def __init__(self, dim, parity=0, hidden_features=64, num_blocks=2, dropout_p=0.0, rng=None):
        Layer.__init__(self, dim)
        self._init_split(dim, parity)
        self.conditioner = ResNetConditioner(self.split, 2 * (dim - self.split),
                                             hidden_features, num_blocks, dropout_p, rng)
        for k, t in self.conditioner.params.items():
            self.params[f"conditioner.{k}"] = t

    def describe(self):
        d = super().describe()
        d.update(parity=self.parity, hidden_features=self.conditioner.hidden_features,
                 num_blocks=self.conditioner.num_blocks, dropout_p=self.conditioner.dropout_p)
        return d

    def _scale_shift(self, x1, rng):
        h = self.conditioner(x1, rng)
        m = self.dim - self.split
        return ad.slice_last(h, 0, m), ad.slice_last(h, m, 2 * m)

    def forward(self, z, rng=None):
        z = ad.as_tensor(z)
        _check_width(z, self.dim, "affine coupling forward")
        x1 = ad.take(z, self.idx1)
        s, t = self._scale_shift(x1, rng)
        x2 = ad.add(ad.mul(ad.take(z, self.idx2), ad.exp(s)), t)
        return self._join(x1, x2), ad.sum(s, axis=-1)

    def inverse(self, x, rng=None):
        x = ad.as_tensor(x)
        _check_width(x, self.dim, "affine coupling inverse")
        x1 = ad.take(x, self.idx1)
        s, t = self._scale_shift(x1, rng)
        z2 = ad.mul(ad.sub(ad.take(x, self.idx2), t), ad.exp(ad.neg(s)))
        return self._join(x1, z2), ad.neg(ad.sum(s, axis=-1))


class LULinear(Layer):
    """Invertible linear map ``v = W u`` with ``W = P L U``.

    ``L`` is unit lower triangular, ``U`` upper triangular with diagonal
    ``exp(log_diag)``, and ``P`` a fixed permutation drawn at construction.
    Starts as the pure permutation.
    """

    kind = "lu_linear"
    orientation = "normalizing"

    def __init__(self, dim, rng=None, permutation=None):
        super().__init__(dim)
        if permutation is None:
            rng = rng if rng is not None else make_rng(0)
            permutation = rng.permutation(dim)
        self.permutation = np.asarray(permutation, dtype=np.intp)
        self.P = np.eye(dim)[self.permutation]
        self.params["lower"] = ad.Tensor(np.zeros((dim, dim)), True)
        self.params["upper"] = ad.Tensor(np.zeros((dim, dim)), True)
        self.params["log_diag"] = ad.Tensor(np.zeros(dim), True)
        self._lmask = np.tril(np.ones((dim, dim)), -1)
        self._umask = np.triu(np.ones((dim, dim)), 1)

    def describe(self):
        d = super().describe()
        d["permutation"] = self.permutation.tolist()
        return d

    def _factors(self):
        eye = np.eye(self.dim)
        L = self.params["lower"].data * self._lmask + eye
        U = self.params["upper"].data * self._umask + np.diag(np.exp(self.params["log_diag"].data))
        return L, U

    def weight_matrix(self):
        L, U = self._factors()
        return self.P @ L @ U

    def _weight(self):
        eye = np.eye(self.dim)
        L = ad.add(ad.mul(self.params["lower"], self._lmask), eye)
        U = ad.add(ad.mul(self.params["upper"], self._umask),
                   ad.mul(eye, ad.exp(self.params["log_diag"])))
        return ad.matmul(ad.Tensor(self.P), ad.matmul(L, U))

    def _logdet(self, n, sign):
        total = ad.sum(self.params["log_diag"])
        return ad.mul(np.full(n, float(sign)), total)

    def forward(self, u, rng=None):
        u = ad.as_tensor(u)
        _check_width(u, self.dim, "LU forward")
        return ad.matmul(u, ad.transpose(self._weight())), self._logdet(u.shape[0], 1)

    def inverse(self, v, rng=None):
        v = ad.as_tensor(v)
        _check_width(v, self.dim, "LU inverse")
        L, U = self._factors()
        # W u = v  <=>  L U u = P^T v
        t = solve_triangular(L, (self.P.T @ v.data.T), lower=True, unit_diagonal=True)
        u = solve_triangular(U, t, lower=False).T
        return ad.Tensor(u), self._logdet(v.shape[0], -1)


class ReversePermutation(Layer):
    kind = "reverse"

    def __init__(self, dim):
        super().__init__(dim)
        self.perm = np.arange(dim)[::-1].copy()

    def forward(self, z, rng=None):
        z = ad.as_tensor(z)
        return ad.take(z, self.perm), _zeros_logdet(z.shape[0])

    inverse = forward


class MadeSplineLayer(Layer):
    """Masked autoregressive spline layer.

    ``forward`` maps ``u -> v`` with ``v_i = g(u_i; theta_i(u_<i))`` in one
    network pass; ``inverse`` needs one pass per dimension.  The cheap pass
    runs in the normalizing direction so density evaluation is parallel.
    """

    kind = "made_spline"
    orientation = "normalizing"

    def __init__(self, dim, settings: sp.SplineSettings, hidden_features=(64, 64),
                 dropout_p=0.0, rng=None):
        super().__init__(dim)
        self.settings = settings
        self.made = MadeConditioner(dim, settings.raw_size, hidden_features, dropout_p, rng)
        for k, t in self.made.params.items():
            self.params[f"made.{k}"] = t

    def describe(self):
        d = super().describe()
        d.update(hidden_features=list(self.made.hidden_features), dropout_p=self.made.dropout_p)
        return d

    def _theta(self, u, rng=None):
        raw = self.made(u, rng)
        return ad.reshape(raw, (u.shape[0], self.dim, self.settings.raw_size))

    def forward(self, u, rng=None):
        u = ad.as_tensor(u)
        _check_width(u, self.dim, "autoregressive forward")
        v, ld = ad.spline_node(self._theta(u, rng), u, self.settings)
        return v, ad.sum(ld, axis=-1)

    def inverse(self, v, rng=None):
        v = ad.as_tensor(v)
        _check_width(v, self.dim, "autoregressive inverse")
        u = np.zeros(v.shape)
        lad = np.zeros(v.shape)
        for i in range(self.dim):
            theta = self._theta(ad.Tensor(u)).data[:, i]
            knots = self.settings.squash(theta)
            res = sp.inverse(knots, v.data[:, i])
            u[:, i] = res.value
            lad[:, i] = res.log_abs_det
        return ad.Tensor(u), ad.Tensor(lad.sum(axis=-1))


# ---------------------------------------------------------------------------
# base distributions
# ---------------------------------------------------------------------------

class StandardNormal:
    kind = "normal"

    def __init__(self, dim):
        self.dim = dim

    def log_prob(self, z):
        z = ad.as_tensor(z)
        quad = ad.sum(ad.square(z), axis=-1)
        return ad.add(ad.mul(quad, -0.5), -0.5 * self.dim * math.log(2.0 * math.pi))

    def sample(self, n, rng):
        return rng.standard_normal((n, self.dim))


class UniformUnitCube:
    """Uniform density on ``[0, 1]^D``; ``-inf`` outside."""

    kind = "uniform"

    def __init__(self, dim):
        self.dim = dim

    def log_prob(self, z):
        z = ad.as_tensor(z)
        inside = np.all((z.data >= 0.0) & (z.data <= 1.0), axis=-1)
        return ad.Tensor(np.where(inside, 0.0, -np.inf))

    def sample(self, n, rng):
        return rng.random((n, self.dim))


BASES = {"normal": StandardNormal, "uniform": UniformUnitCube}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class FlowModel:
    """Ordered stack of invertible layers on top of a base distribution."""

    def __init__(self, layers, base, mode="coupling", settings=None):
        dims = {layer.dim for layer in layers} | {base.dim}
        if len(dims) != 1:
            raise ShapeMismatch(f"layer dimensions do not chain: {sorted(dims)}")
        self.layers = list(layers)
        self.base = base
        self.mode = mode
        self.settings = settings
        self.dim = base.dim

    def named_parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, t in layer.params.items():
                out[f"layers.{i}.{k}"] = t
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(t.data.size for t in self.parameters()))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def topology(self) -> dict:
        s = self.settings
        return {
            "dim": self.dim,
            "mode": self.mode,
            "base": self.base.kind,
            "storage_order": "generation",
            "spline": None if s is None else {
                "num_bins": s.num_bins, "tail_bound": s.tail_bound, "min_bin": s.min_bin,
                "min_deriv": s.min_deriv, "lambda_eps": s.lambda_eps,
                "shared_lambda": s.shared_lambda},
            "layers": [layer.describe() for layer in self.layers],
        }

    def normalize(self, x, rng=None):
        """Map data to the base space; returns ``(z, log|det dz/dx|)`` tensors."""
        x = ad.as_tensor(x)
        _check_width(x, self.dim, "flow")
        total = _zeros_logdet(x.shape[0])
        for layer in reversed(self.layers):
            if layer.orientation == "generative":
                x, ld = layer.inverse(x, rng)
            else:
                x, ld = layer.forward(x, rng)
            total = ad.add(total, ld)
        return x, total

    def log_prob_tensor(self, x, rng=None):
        z, ld = self.normalize(x, rng)
        return ad.add(self.base.log_prob(z), ld)

    def log_prob(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.log_prob_tensor(x).data

    def generate(self, z):
        """Map base samples to data space; returns ``(x, log|det dx/dz|)`` arrays."""
        z = ad.as_tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
        total = np.zeros(z.shape[0])
        for layer in self.layers:
            if layer.orientation == "generative":
                z, ld = layer.forward(z)
            else:
                z, ld = layer.inverse(z)
            total = total + ld.data
        return z.data, total

    def sample(self, n, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
        z = self.base.sample(int(n), rng)
        return self.generate(z)[0]


def build_model(dim, *, mode="coupling", transform="lrs", num_layers=2, num_bins=8,
                tail_bound=3.0, hidden_features=64, num_blocks=2, dropout_p=0.0,
                base="normal", use_lu=None, transform_first=True, shared_lambda=False,
                min_bin=None, min_deriv=sp.MIN_DERIV, lambda_eps=sp.LAMBDA_EPS,
                made_hidden=None, seed=0):
    """Assemble a flow.

    Coupling mode stacks ``[LU, coupling]`` pairs with alternating parity;
    autoregressive mode stacks masked spline layers separated by reversals.
    ``use_lu`` defaults to on for coupling and off for autoregressive mode.
    """
    if mode not in ("coupling", "autoregressive"):
        raise ValueError(f"unknown mode {mode!r}")
    if transform not in ("lrs", "affine"):
        raise ValueError(f"unknown transform {transform!r}")
    if mode == "autoregressive" and transform != "lrs":
        raise ValueError("the affine baseline is only available in coupling mode")
    if base not in BASES:
        raise ValueError(f"unknown base distribution {base!r}")
    if use_lu is None:
        use_lu = mode == "coupling"
    rng = make_rng(seed)
    settings = sp.SplineSettings(num_bins, float(tail_bound), min_bin, min_deriv, lambda_eps,
                                 shared_lambda)
    layers = []
    for i in range(num_layers):
        if use_lu:
            layers.append(LULinear(dim, rng))
        if mode == "coupling":
            if transform == "lrs":
                layers.append(SplineCouplingLayer(dim, settings, i % 2, hidden_features,
                                                  num_blocks, dropout_p, transform_first, rng))
            else:
                layers.append(AffineCouplingLayer(dim, i % 2, hidden_features, num_blocks,
                                                  dropout_p, rng))
        else:
            hidden = made_hidden or (hidden_features,) * max(num_blocks, 1)
            layers.append(MadeSplineLayer(dim, settings, hidden, dropout_p, rng))
            if i < num_layers - 1:
                layers.append(ReversePermutation(dim))
    return FlowModel(layers, BASES[base](dim), mode, settings)
