"""Loss terms and their composition into the full training objective.

All likelihood-style terms are realized as losses to minimize: frame
log-likelihood becomes mean squared error (unit-variance Gaussian with
constants dropped), and the control-point term uses the same MSE convention
so its weight is comparable with the reconstruction term.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    exp,
    mean,
    mul,
    negate,
    sqrt,
    square,
    sub,
    sum as tsum,
)


class ObjectiveConfigError(ValueError):
    """Inconsistent objective configuration (flag / weight mismatch)."""


class CpcProvenanceError(ValueError):
    """The control-point frame came from the wrong latent path."""


@dataclass
class ObjectiveConfig:
    """Weights and flags of the full objective.

    A weight of zero and its flag being off must agree; `validate` enforces
    this so a config file cannot silently disable a term.
    """

    beta: float = 1e-4
    alpha_cpc: float = 100.0
    alpha_align: float = 0.5
    p_skip: float = 0.5
    use_cpc: bool = True
    use_align: bool = True
    use_skip: bool = True
    condition_on_end: bool = True
    cpc_on: str = "prior"  # or "posterior", for the weight-sweep comparison
    cpc_free_running: bool = False

    def validate(self):
        if self.beta < 0 or self.alpha_cpc < 0 or self.alpha_align < 0:
            raise ObjectiveConfigError("weights must be non-negative")
        if not 0.0 <= self.p_skip < 1.0:
            raise ObjectiveConfigError(f"p_skip must lie in [0, 1), got {self.p_skip}")
        if self.use_cpc != (self.alpha_cpc > 0):
            raise ObjectiveConfigError(
                f"use_cpc={self.use_cpc} inconsistent with alpha_cpc={self.alpha_cpc}"
            )
        if self.use_align != (self.alpha_align > 0):
            raise ObjectiveConfigError(
                f"use_align={self.use_align} inconsistent with alpha_align={self.alpha_align}"
            )
        if self.use_skip != (self.p_skip > 0):
            raise ObjectiveConfigError(
                f"use_skip={self.use_skip} inconsistent with p_skip={self.p_skip}"
            )
        if self.cpc_on not in ("prior", "posterior"):
            raise ObjectiveConfigError(f"cpc_on must be 'prior' or 'posterior', got {self.cpc_on!r}")
        return self

    def with_flags(self, **flags):
        return replace(self, **flags)


@dataclass
class LossBreakdown:
    """Scalar loss tensors; total = recon + beta*kl + alpha_align*align + alpha_cpc*cpc."""

    recon: Tensor
    kl: Tensor
    align: Tensor
    cpc: Tensor
    total: Tensor

    def floats(self):
        return {
            "recon": self.recon.item(),
            "kl": self.kl.item(),
            "align": self.align.item(),
            "cpc": self.cpc.item(),
            "total": self.total.item(),
        }


def reconstruction_loss(x_hat, x):
    """Mean squared error over the feature dimension, averaged over the batch."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction: shapes {x_hat.shape} and {x.shape} differ")
    return mean(square(sub(x_hat, x)))


def kl_gaussians(mu_q, logvar_q, mu_p, logvar_p):
    """Closed-form KL(q || p) between diagonal Gaussians.

    Summed over latent dimensions (last axis), averaged over any batch axis.
    """
    shapes = {mu_q.shape, logvar_q.shape, mu_p.shape, logvar_p.shape}
    if len(shapes) != 1:
        raise ShapeError(f"kl_gaussians: operand shapes differ: {sorted(shapes)}")
    inner = sub(
        add(
            sub(logvar_p, logvar_q),
            mul(add(exp(logvar_q), square(sub(mu_q, mu_p))), exp(negate(logvar_p))),
        ),
        1.0,
    )
    last = inner.ndim - 1
    per_item = tsum(inner, axis=last) if inner.ndim > 0 else inner
    if per_item.ndim > 0:
        per_item = mean(per_item)
    return mul(per_item, 0.5)


def alignment_loss(h, g):
    """Euclidean norm of (h - g) per sample, averaged over the batch."""
    if h.shape != g.shape:
        raise ShapeError(f"alignment: shapes {h.shape} and {g.shape} differ")
    sq = square(sub(h, g))
    if sq.ndim == 1:
        return sqrt(tsum(sq))
    return mean(sqrt(tsum(sq, axis=1)))


def cpc_loss(x_hat_end, x_end):
    """MSE between a prior-driven generated end-frame and the targeted end-frame.

    Same convention as `reconstruction_loss`, so the CPC weight is directly
    comparable with the reconstruction term. Callers are responsible for the
    latent provenance of `x_hat_end`; `full_objective` checks the rollout
    record's path tag.
    """
    return reconstruction_loss(x_hat_end, x_end)


def skip_mask_sample(total, p_skip, rng):
    """Bernoulli(1 - p_skip) keep mask over 1..T with both endpoints forced kept.

    The first frame anchors the rollout and the last is the control point,
    so mask[0] = mask[T-1] = 1 always.
    """
    if total < 2:
        raise ValueError(f"mask length must be >= 2, got {total}")
    if not 0.0 <= p_skip < 1.0:
        raise ValueError(f"p_skip must lie in [0, 1), got {p_skip}")
    mask = np.ones(total, dtype=np.int64)
    if total > 2 and p_skip > 0.0:
        mask[1:-1] = (rng.random(total - 2) >= p_skip).astype(np.int64)
    return mask


def _mean_of(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return mul(acc, 1.0 / len(terms))


def full_objective(record, cfg):
    """Compose per-kept-step means of the loss terms into the total.

    Per-kept-step averaging (divide by the number of kept generation steps)
    keeps the skip rate from silently rescaling the effective learning rate.
    """
    cfg.validate()
    kept = record.kept
    if not kept:
        raise ValueError("rollout record has no kept steps")
    frames = record.frames

    recon_terms = []
    kl_terms = []
    align_terms = []
    for i in kept:
        target = Tensor(frames[:, i])
        recon_terms.append(reconstruction_loss(record.x_hat[i], target))
        kl_terms.append(
            kl_gaussians(record.mu_q[i], record.logvar_q[i], record.mu_p[i], record.logvar_p[i])
        )
        if cfg.use_align:
            align_terms.append(alignment_loss(record.h[i], record.g[i]))

    recon = _mean_of(recon_terms)
    kl = _mean_of(kl_terms)
    align = _mean_of(align_terms) if cfg.use_align else Tensor(0.0)

    if cfg.use_cpc:
        if record.cpc_x_hat is None:
            raise ValueError("objective wants a CPC term but the record has no CPC rollout")
        if record.cpc_path != cfg.cpc_on:
            raise CpcProvenanceError(
                f"CPC frame came from the {record.cpc_path!r} path, config wants {cfg.cpc_on!r}"
            )
        cpc = cpc_loss(record.cpc_x_hat, Tensor(frames[:, -1]))
    else:
        cpc = Tensor(0.0)

    total = add(
        add(add(recon, mul(kl, cfg.beta)), mul(align, cfg.alpha_align)),
        mul(cpc, cfg.alpha_cpc),
    )
    return LossBreakdown(recon=recon, kl=kl, align=align, cpc=cpc, total=total)
