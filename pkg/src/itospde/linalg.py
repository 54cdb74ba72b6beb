"""Batched preconditioned conjugate gradient for SPD operators."""

from __future__ import annotations

import numpy as np

from .errors import SolverDivergence


def pcg(apply, b, diag=None, rel_tol=1e-10, maxiter=None):
    """Solve ``A x = b`` column-wise for a batch of right-hand sides.

    ``apply`` maps arrays of shape ``(..., N)`` to the same shape and must be
    symmetric positive definite on the trailing axis.  ``diag`` is the Jacobi
    preconditioner (the diagonal of ``A``), broadcastable to ``b``.

    Columns that reach ``||r|| <= rel_tol * ||b||`` are frozen, so every
    column follows exactly the iteration it would follow if solved alone.

    Returns
    -------
    x : ndarray
    info : dict
        ``iterations`` (max over columns) and ``residual`` (max relative).
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[-1]
    if maxiter is None:
        maxiter = 10 * n
    inv_diag = 1.0 if diag is None else 1.0 / np.asarray(diag, dtype=float)

    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.sqrt(np.sum(b * b, axis=-1))
    target = rel_tol * bnorm
    z = r * inv_diag
    p = z.copy()
    rz = np.sum(r * z, axis=-1)
    rnorm = bnorm.copy()
    active = rnorm > target

    it = 0
    while np.any(active):
        if it >= maxiter:
            worst = float(np.max(np.where(bnorm > 0, rnorm / np.where(bnorm > 0, bnorm, 1), 0)))
            raise SolverDivergence(
                f"CG did not reach rel_tol={rel_tol} in {maxiter} iterations "
                f"(relative residual {worst:.3e})",
                iterations=it,
                residual=worst,
            )
        ap = apply(p)
        pap = np.sum(p * ap, axis=-1)
        alpha = np.where(active, rz / np.where(active, pap, 1.0), 0.0)
        x = x + alpha[..., None] * p
        r = r - alpha[..., None] * ap
        rnorm = np.where(active, np.sqrt(np.sum(r * r, axis=-1)), rnorm)
        still = active & (rnorm > target)
        z = r * inv_diag
        rz_new = np.sum(r * z, axis=-1)
        beta = np.where(still, rz_new / np.where(still, rz, 1.0), 0.0)
        p = np.where(still[..., None], z + beta[..., None] * p, p)
        rz = np.where(still, rz_new, rz)
        active = still
        it += 1

    rel = np.where(bnorm > 0, rnorm / np.where(bnorm > 0, bnorm, 1.0), 0.0)
    return x, {"iterations": it, "residual": float(np.max(rel, initial=0.0))}
