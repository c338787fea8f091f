"""Small dense box-constrained convex QP (primal active set)."""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class InfeasibleBox(ValueError):
    pass


def solve_box_qp(H, g, lo, hi, x0=None, max_iter=100, tol=1e-12):
    """Minimise ``0.5 x'Hx + g'x`` subject to ``lo <= x <= hi``.

    ``H`` must be symmetric positive definite.  The start point is the
    projection of ``x0`` (default 0) onto the box.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = len(g)
    if np.any(lo > hi):
        raise InfeasibleBox("empty box")
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    at_lo = x <= lo
    at_hi = (x >= hi) & ~at_lo
    scale = max(1.0, np.abs(H).max())
    for _ in range(max_iter):
        fixed = at_lo | at_hi
        free = ~fixed
        grad = H @ x + g
        p = np.zeros(n)
        if free.any():
            p[free] = np.linalg.solve(H[np.ix_(free, free)], -grad[free])
        alpha = 1.0
        block = -1
        block_lo = False
        for i in np.flatnonzero(free):
            if p[i] < 0:
                a = (lo[i] - x[i]) / p[i]
            elif p[i] > 0:
                a = (hi[i] - x[i]) / p[i]
            else:
                continue
            if a < alpha:
                alpha, block, block_lo = a, i, p[i] < 0
        x = x + alpha * p
        if block >= 0:
            if block_lo:
                x[block] = lo[block]
                at_lo[block] = True
            else:
                x[block] = hi[block]
                at_hi[block] = True
            continue
        # the free subproblem is solved exactly; check the bound multipliers
        grad = H @ x + g
        lam = np.where(at_lo, grad, np.where(at_hi, -grad, 0.0))
        if not fixed.any() or lam[fixed].min() >= -tol * scale:
            return x
        i = int(np.argmin(np.where(fixed, lam, np.inf)))
        at_lo[i] = at_hi[i] = False
    logger.warning("solve_box_qp: no convergence in %d iterations", max_iter)
    return x


def kkt_residual(H, g, lo, hi, x):
    """Norm of the projected gradient at ``x`` (zero at the optimum)."""
    grad = H @ x + g
    r = grad.copy()
    eps = 1e-12 * max(1.0, np.abs(x).max())
    at_lo = x <= lo + eps
    at_hi = x >= hi - eps
    r[at_lo] = np.minimum(grad[at_lo], 0.0)
    r[at_hi] = np.maximum(grad[at_hi], 0.0)
    feas = np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0)
    return float(np.linalg.norm(r) + np.linalg.norm(feas))
