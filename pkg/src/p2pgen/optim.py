"""Adam with bias correction, plus global gradient-norm clipping."""

from __future__ import annotations

import numpy as np


class OptimizerError(RuntimeError):
    """Non-finite gradient or misconfigured optimizer state."""


class Adam:
    """Bias-corrected Adam over named parameters.

    Moment arrays are shaped exactly like their parameters; a missing
    gradient is treated as zero (the parameter still decays its moments).
    A non-finite gradient aborts with the offending parameter's name.
    """

    def __init__(self, named_params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        named_params = list(named_params)
        names = [n for n, _ in named_params]
        if len(set(names)) != len(names):
            raise OptimizerError("duplicate parameter names")
        ids = [id(p) for _, p in named_params]
        if len(set(ids)) != len(ids):
            raise OptimizerError("a parameter was registered more than once")
        self.named_params = named_params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for _, p in named_params]
        self.v = [np.zeros(p.shape) for _, p in named_params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for parameter '{name}'")
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
