"""A small reverse-mode differentiation engine over numpy arrays.

Graphs are built dynamically: every op returns a new :class:`Tensor` that
remembers its parents and a closure computing vector-Jacobian products.
Calling :func:`backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires gradients.
"""
from __future__ import annotations

import numpy as np

from . import spline as _spline
from .errors import NotScalar, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use slice_last/take for indexing tensors")


# Node and Tensor are the same thing here: a value plus its graph bookkeeping.
Node = Tensor


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = None

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = None

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, -_unbroadcast(out.grad, b.shape))

    out = _make(a.data - b.data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = None

    def backward():
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward():
        _accumulate(a, -out.grad)

    out = _make(-a.data, (a,), backward)
    return out


def _unary(a, value, local_grad):
    a = as_tensor(a)
    out = None

    def backward():
        _accumulate(a, out.grad * local_grad())

    out = _make(value, (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda: 1.0 - t * t)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), lambda: (a.data > 0.0).astype(np.float64))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda: e)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def logistic(a) -> Tensor:
    a = as_tensor(a)
    s = _spline.expit(a.data)
    return _unary(a, s, lambda: s * (1.0 - s))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.logaddexp(0.0, a.data), lambda: _spline.expit(a.data))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = None

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            _accumulate(b, a2.T @ g.reshape(-1, b.shape[1]))

    out = _make(a.data @ b.data, (a, b), backward)
    return out


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with bias broadcast over the leading axes."""
    weight, bias = as_tensor(weight), as_tensor(bias)
    if bias.shape != (weight.shape[-1],):
        raise ShapeMismatch(f"affine: bias shape {bias.shape} does not match weight {weight.shape}")
    return add(matmul(x, weight), bias)


def masked_matmul(x, weight, mask) -> Tensor:
    """``x @ (weight * mask)`` where ``mask`` is a fixed binary array."""
    x, weight = as_tensor(x), as_tensor(weight)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != weight.shape:
        raise ShapeMismatch(f"masked_matmul: mask {mask.shape} vs weight {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"masked_matmul: shapes {x.shape} and {weight.shape} are incompatible")
    w = weight.data * mask
    out = None

    def backward():
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g @ w.T)
        if weight.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            _accumulate(weight, (x2.T @ g.reshape(-1, w.shape[1])) * mask)

    out = _make(x.data @ w, (x, weight), backward)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    out = None

    def backward():
        _accumulate(a, out.grad.T)

    out = _make(a.data.T, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = None

    def backward():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out = _make(np.sum(a.data, axis=axis), (a,), backward)
    return out


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward():
        _accumulate(a, out.grad.reshape(a.shape))

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot reshape {a.shape} into {shape}") from None
    out = _make(data, (a,), backward)
    return out


def slice_last(a, start, stop) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[-1]:
        raise ShapeMismatch(f"slice_last: [{start}:{stop}] out of range for shape {a.shape}")
    out = None

    def backward():
        g = np.zeros(a.shape)
        g[..., start:stop] = out.grad
        _accumulate(a, g)

    out = _make(a.data[..., start:stop], (a,), backward)
    return out


def take(a, indices) -> Tensor:
    """Select (and reorder) entries along the last axis."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = None

    def backward():
        g = np.zeros(a.shape)
        np.add.at(g, (..., indices), out.grad)
        _accumulate(a, g)

    out = _make(a.data[..., indices], (a,), backward)
    return out


def concat(tensors) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])
    out = None

    def backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, out.grad[..., lo:hi])

    out = _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward)
    return out


def dropout(a, p, rng) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    a = as_tensor(a)
    if rng is None or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones(loss.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# spline bundle
# ---------------------------------------------------------------------------

def spline_node(raw, x, settings, inverse=False):
    """Elementwise monotone spline as a single graph node.

    ``raw`` has shape ``(..., n, 4K - 1)`` broadcastable against ``x`` of
    shape ``(..., n)``; each element of ``x`` is transformed by its own
    spline.  Returns ``(value, log_abs_det)`` tensors shaped like ``x``.  The
    backward pass uses the analytic spline derivatives followed by the
    squashing VJP; shared parameters are squashed once and their gradients
    summed over the broadcast axes.
    """
    raw, x = as_tensor(raw), as_tensor(x)
    K = settings.num_bins
    if raw.shape[-1] != _spline.raw_size(K):
        raise ShapeMismatch(f"spline_node: raw shape {raw.shape} needs last axis {_spline.raw_size(K)}")
    try:
        np.broadcast_shapes(raw.shape[:-1], x.shape)
    except ValueError:
        raise ShapeMismatch(f"spline_node: raw {raw.shape} does not broadcast with x {x.shape}") from None
    kw = settings.squash_kwargs()
    knots = _spline.squash_raw_params(raw.data, K, **kw)
    fn = _spline.inverse if inverse else _spline.forward
    value, lad = fn(knots, x.data)
    stacked = np.stack([value, lad], axis=-1)
    out = None

    def backward():
        g = out.grad
        grad_fn = _spline.inverse_gradient if inverse else _spline.spline_gradient
        grads = grad_fn(knots, x.data, g[..., 0], g[..., 1])
        if x.requires_grad:
            _accumulate(x, _unbroadcast(grads.x, x.shape))
        if raw.requires_grad:
            lead = raw.shape[:-1]
            reduced = _spline.SplineGradients(
                None,
                *(_unbroadcast(getattr(grads, f), lead + getattr(grads, f).shape[-1:])
                  for f in ("xs", "ys", "ds", "lambdas")))
            _accumulate(raw, _spline.squash_gradient(raw.data, reduced, K, **kw))

    out = _make(stacked, (raw, x), backward)
    v = reshape(slice_last(out, 0, 1), value.shape)
    ld = reshape(slice_last(out, 1, 2), value.shape)
    return v, ld
