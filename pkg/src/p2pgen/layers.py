"""Parameterized building blocks: linear maps, residual MLP encoder/decoder,
LSTM cell, and Gaussian heads with reparameterized sampling.

All layers are plain parameter containers over `tensor.Tensor`; construction
leaves parameters at zero, `init_params` fills them (Xavier-uniform weights,
zero biases, LSTM forget-gate bias +1).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    bias_add,
    concat,
    exp,
    matmul_t,
    mul,
    mul_const,
    sigmoid,
    slice_axis,
    tanh,
    zeros,
)


class Linear:
    """y = x Wᵀ + b over row-batched inputs; W stored [out, in]."""

    def __init__(self, in_dim, out_dim):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = zeros((out_dim, in_dim))
        self.b = zeros(out_dim)

    def __call__(self, x):
        return bias_add(matmul_t(x, self.W), self.b)

    def named_parameters(self, prefix=""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]

    def sublayers(self):
        return [self]


class LSTMCell:
    """Standard LSTM cell over concatenated (input, hidden).

    Gates are laid out i, f, o, g so the three sigmoids run as one fused
    activation; the forget-gate bias stays at slice [H, 2H).
    """

    def __init__(self, input_dim, hidden_dim):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.W = zeros((4 * hidden_dim, input_dim + hidden_dim))
        self.b = zeros(4 * hidden_dim)

    def init_state(self, batch):
        return (zeros((batch, self.hidden_dim)), zeros((batch, self.hidden_dim)))

    def step(self, x, state):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"lstm_step: input width {x.shape} does not match cell input {self.input_dim}"
            )
        h, c = state
        hd = self.hidden_dim
        gates = bias_add(matmul_t(concat([x, h], axis=1), self.W), self.b)
        ifo = sigmoid(slice_axis(gates, 1, 0, 3 * hd))
        i = slice_axis(ifo, 1, 0, hd)
        f = slice_axis(ifo, 1, hd, 2 * hd)
        o = slice_axis(ifo, 1, 2 * hd, 3 * hd)
        g = tanh(slice_axis(gates, 1, 3 * hd, 4 * hd))
        c_next = add(mul(f, c), mul(i, g))
        h_next = mul(o, tanh(c_next))
        return (h_next, c_next)

    def named_parameters(self, prefix=""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]

    def sublayers(self):
        return [self]


def lstm_step(cell, x, state):
    """One LSTM recurrence; differentiable w.r.t. inputs, state, and weights."""
    return cell.step(x, state)


class ResidualBlock:
    """x + tanh(W x + b) at a fixed width."""

    def __init__(self, width):
        self.lin = Linear(width, width)

    def __call__(self, x):
        return add(x, tanh(self.lin(x)))

    def named_parameters(self, prefix=""):
        return self.lin.named_parameters(prefix + "lin.")

    def sublayers(self):
        return [self.lin]


class MLPEncoder:
    """Frame encoder: input projection, two residual blocks, tanh-bounded output.

    The tanh keeps every feature in (-1, 1), which the alignment loss relies on.
    """

    def __init__(self, frame_dim, hidden_dim, out_dim):
        self.frame_dim = frame_dim
        self.out_dim = out_dim
        self.in_proj = Linear(frame_dim, hidden_dim)
        self.blocks = [ResidualBlock(hidden_dim), ResidualBlock(hidden_dim)]
        self.out_proj = Linear(hidden_dim, out_dim)

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.frame_dim:
            raise ShapeError(f"encoder expects [batch, {self.frame_dim}], got {x.shape}")
        h = tanh(self.in_proj(x))
        for blk in self.blocks:
            h = blk(h)
        return tanh(self.out_proj(h))

    def named_parameters(self, prefix=""):
        out = self.in_proj.named_parameters(prefix + "in_proj.")
        for k, blk in enumerate(self.blocks):
            out += blk.named_parameters(prefix + f"block{k}.")
        out += self.out_proj.named_parameters(prefix + "out_proj.")
        return out

    def sublayers(self):
        return [self.in_proj] + [b.lin for b in self.blocks] + [self.out_proj]


class MLPDecoder:
    """Mirror of the encoder without the output tanh; frame values unconstrained."""

    def __init__(self, in_dim, hidden_dim, frame_dim):
        self.in_dim = in_dim
        self.frame_dim = frame_dim
        self.in_proj = Linear(in_dim, hidden_dim)
        self.blocks = [ResidualBlock(hidden_dim), ResidualBlock(hidden_dim)]
        self.out_proj = Linear(hidden_dim, frame_dim)

    def __call__(self, g):
        if g.ndim != 2 or g.shape[1] != self.in_dim:
            raise ShapeError(f"decoder expects [batch, {self.in_dim}], got {g.shape}")
        h = tanh(self.in_proj(g))
        for blk in self.blocks:
            h = blk(h)
        return self.out_proj(h)

    def named_parameters(self, prefix=""):
        out = self.in_proj.named_parameters(prefix + "in_proj.")
        for k, blk in enumerate(self.blocks):
            out += blk.named_parameters(prefix + f"block{k}.")
        out += self.out_proj.named_parameters(prefix + "out_proj.")
        return out

    def sublayers(self):
        return [self.in_proj] + [b.lin for b in self.blocks] + [self.out_proj]


class GaussianHead:
    """Linear maps from a hidden state to (mean, log-variance).

    Log-variance rather than a direct std keeps the parameterization
    unconstrained; sigma = exp(logvar / 2) is positive by construction.
    """

    def __init__(self, hidden_dim, latent_dim):
        self.mu = Linear(hidden_dim, latent_dim)
        self.logvar = Linear(hidden_dim, latent_dim)

    def __call__(self, h):
        return self.mu(h), self.logvar(h)

    def named_parameters(self, prefix=""):
        return self.mu.named_parameters(prefix + "mu.") + self.logvar.named_parameters(
            prefix + "logvar."
        )

    def sublayers(self):
        return [self.mu, self.logvar]


def reparam_sample(mu, logvar, rng):
    """z = mu + exp(logvar/2) * eps with eps ~ N(0, I) drawn from rng.

    Gradient flows to mu and logvar only; eps enters as a constant.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparam_sample: shapes {mu.shape} and {logvar.shape} differ")
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul_const(exp(mul(logvar, 0.5)), eps))


def xavier_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(layer, rng, scheme="xavier_uniform"):
    """Fill a fresh layer's parameters in place.

    Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero, and the
    LSTM forget-gate bias slice set to +1 (recurrent training stabilizer).
    """
    if scheme != "xavier_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if isinstance(layer, Linear):
        bound = xavier_bound(layer.in_dim, layer.out_dim)
        layer.W.data[...] = rng.uniform(-bound, bound, size=layer.W.shape)
        layer.b.data[...] = 0.0
    elif isinstance(layer, LSTMCell):
        hd = layer.hidden_dim
        bound = xavier_bound(layer.input_dim + hd, 4 * hd)
        layer.W.data[...] = rng.uniform(-bound, bound, size=layer.W.shape)
        layer.b.data[...] = 0.0
        layer.b.data[hd:2 * hd] = 1.0
    else:
        for sub in layer.sublayers():
            init_params(sub, rng, scheme)


def parameter_count(layer):
    return int(np.sum([p.size for _, p in layer.named_parameters()]))
