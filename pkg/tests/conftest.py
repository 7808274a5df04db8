"""Shared test helpers: the central finite-difference gradient oracle."""

import numpy as np

FD_EPS = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_FLOOR = 1e-7


def fd_gradient(f, leaves, eps=FD_EPS):
    """Central finite differences of a scalar-valued f() w.r.t. each leaf.

    f must recompute the forward value from the leaves' current data on
    every call; leaves are perturbed in place and restored.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f()
            flat[j] = orig - eps
            fm = f()
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_grad_error(ad, fd, rel=FD_REL_TOL, floor=FD_ABS_FLOOR):
    """Worst elementwise error of autodiff grads vs the oracle, as a multiple
    of the allowed tolerance (<= 1 passes)."""
    worst = 0.0
    for a, f in zip(ad, fd):
        a = np.zeros_like(f) if a is None else a
        err = np.abs(a - f)
        tol = np.maximum(rel * np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float((err / tol).max()))
    return worst


def assert_grads_match(ad, fd, rel=FD_REL_TOL, floor=FD_ABS_FLOOR):
    worst = max_grad_error(ad, fd, rel, floor)
    assert worst <= 1.0, f"gradient mismatch: worst error {worst:.3g}x tolerance"
