"""Conditioner networks producing raw spline parameters.

Both networks zero-initialise their output layer, so a fresh flow starts at
the squashed zero point of every spline (uniform bins, unit derivatives,
``lambda = 0.5``), which is exactly the identity map.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch


def _uniform_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ResNetConditioner:
    """Residual MLP: input affine, ``num_blocks`` residual blocks, output affine.

    A residual block computes ``h + W2 tanh(W1 tanh(h) + b1) + b2``; dropout
    is applied to the output of every block while training.
    """

    def __init__(self, in_features, out_features, hidden_features=64, num_blocks=2,
                 dropout_p=0.0, rng=None, name="resnet"):
        self.in_features = in_features
        self.out_features = out_features
        self.hidden_features = hidden_features
        self.num_blocks = num_blocks
        self.dropout_p = dropout_p
        self.name = name
        H = hidden_features
        self.params = {"w_in": ad.Tensor(np.zeros((in_features, H)), True),
                       "b_in": ad.Tensor(np.zeros(H), True)}
        for i in range(num_blocks):
            for j in (1, 2):
                self.params[f"block{i}.w{j}"] = ad.Tensor(np.zeros((H, H)), True)
                self.params[f"block{i}.b{j}"] = ad.Tensor(np.zeros(H), True)
        self.params["w_out"] = ad.Tensor(np.zeros((H, out_features)), True)
        self.params["b_out"] = ad.Tensor(np.zeros(out_features), True)
        for key, t in self.params.items():
            t.name = f"{name}.{key}"
        if rng is not None:
            self.init(rng)

    def init(self, rng):
        """Fan-in scaled uniform weights for hidden layers; zero output layer."""
        H = self.hidden_features
        self.params["w_in"].data[...] = _uniform_init(rng, self.in_features, H)
        self.params["b_in"].data[...] = _uniform_init(rng, self.in_features, H)[0]
        for i in range(self.num_blocks):
            for j in (1, 2):
                self.params[f"block{i}.w{j}"].data[...] = _uniform_init(rng, H, H)
                self.params[f"block{i}.b{j}"].data[...] = _uniform_init(rng, H, H)[0]
        self.params["w_out"].data[...] = 0.0
        self.params["b_out"].data[...] = 0.0

    def parameters(self):
        return list(self.params.values())

    def __call__(self, x, rng=None):
        """Raw outputs for inputs ``x`` of shape ``(N, in_features)``.

        ``rng`` enables dropout; pass ``None`` for deterministic evaluation.
        """
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(
                f"conditioner expects {self.in_features} inputs, got shape {x.shape}")
        p = self.params
        h = ad.affine(x, p["w_in"], p["b_in"])
        for i in range(self.num_blocks):
            t = ad.affine(ad.tanh(h), p[f"block{i}.w1"], p[f"block{i}.b1"])
            t = ad.affine(ad.tanh(t), p[f"block{i}.w2"], p[f"block{i}.b2"])
            h = ad.dropout(ad.add(h, t), self.dropout_p, rng)
        return ad.affine(ad.tanh(h), p["w_out"], p["b_out"])


def made_degrees(num_inputs, hidden_features):
    """Degrees of input and hidden units; inputs are numbered 1..D."""
    degrees = [np.arange(1, num_inputs + 1)]
    top = max(num_inputs - 1, 1)
    for width in hidden_features:
        degrees.append(np.arange(width) % top + 1)
    return degrees


def made_masks(num_inputs, hidden_features, block_size):
    """Binary masks for a MADE whose output block ``i`` sees only inputs ``< i``."""
    degrees = made_degrees(num_inputs, hidden_features)
    masks = [(d_out[None, :] >= d_in[:, None]).astype(np.float64)
             for d_in, d_out in zip(degrees[:-1], degrees[1:])]
    out_degrees = np.repeat(np.arange(1, num_inputs + 1), block_size)
    masks.append((out_degrees[None, :] > degrees[-1][:, None]).astype(np.float64))
    return masks


class MadeConditioner:
    """Masked autoencoder with ``num_inputs * block_size`` outputs.

    Output ``[i * block_size, (i + 1) * block_size)`` depends only on inputs
    with index below ``i``; block 0 is a pure bias.
    """

    def __init__(self, num_inputs, block_size, hidden_features=(64, 64), dropout_p=0.0,
                 rng=None, name="made"):
        if num_inputs < 2:
            raise ShapeMismatch("a MADE conditioner needs at least two inputs")
        self.num_inputs = num_inputs
        self.block_size = block_size
        self.hidden_features = tuple(hidden_features)
        self.dropout_p = dropout_p
        self.name = name
        self.masks = made_masks(num_inputs, self.hidden_features, block_size)
        sizes = [num_inputs, *self.hidden_features, num_inputs * block_size]
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"w{i}"] = ad.Tensor(np.zeros((a, b)), True, name=f"{name}.w{i}")
            self.params[f"b{i}"] = ad.Tensor(np.zeros(b), True, name=f"{name}.b{i}")
        if rng is not None:
            self.init(rng)

    @property
    def num_layers(self):
        return len(self.masks)

    def init(self, rng):
        for i in range(self.num_layers - 1):
            w = self.params[f"w{i}"].data
            w[...] = _uniform_init(rng, *w.shape)
            self.params[f"b{i}"].data[...] = _uniform_init(rng, *w.shape)[0]
        last = self.num_layers - 1
        self.params[f"w{last}"].data[...] = 0.0
        self.params[f"b{last}"].data[...] = 0.0

    def parameters(self):
        return list(self.params.values())

    def __call__(self, x, rng=None):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.num_inputs:
            raise ShapeMismatch(f"MADE expects {self.num_inputs} inputs, got shape {x.shape}")
        h = x
        for i, mask in enumerate(self.masks):
            h = ad.add(ad.masked_matmul(h, self.params[f"w{i}"], mask), self.params[f"b{i}"])
            if i < self.num_layers - 1:
                h = ad.dropout(ad.tanh(h), self.dropout_p, rng)
        return h
