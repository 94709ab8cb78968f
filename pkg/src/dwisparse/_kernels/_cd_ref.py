"""Pure NumPy coordinate descent for batches of nonnegative lasso problems.

Solves, for every column j independently,

    min_{a >= 0}  0.5 * ||x_j - D a||^2  +  sum_k pen[k, j] * a[k]

given only the Gram matrix G = D^T D and the correlations C = D^T X.
Columns share nothing, so one cyclic pass updates coordinate k of every
still-active column at once; per-column gradients are kept current
through the running product q = G a.  This file is the reference
implementation; the compiled extension must match it to solver
tolerance.
"""

from __future__ import annotations

import numpy as np

__all__ = ["nn_lasso_batch"]


def nn_lasso_batch(gram, corr, penalties, coefs, xsq, tol, max_sweeps=1000):
    """Batched nonnegative lasso by cyclic coordinate descent.

    Parameters
    ----------
    gram : ndarray, shape (p, p)
        Dictionary Gram matrix D^T D, symmetric.
    corr : ndarray, shape (p, n)
        D^T X for the n data columns.
    penalties : ndarray, shape (p, n)
        Nonnegative per-coefficient penalty weights.
    coefs : ndarray, shape (p, n)
        Starting coefficients, modified in place (warm starts).
    xsq : ndarray, shape (n,)
        Squared norms ||x_j||^2, used only for the residual output.
    tol : ndarray, shape (n,)
        Per-column stationarity tolerance: a column is converged when
        every positive coefficient has |gradient| <= tol and every zero
        coefficient has gradient <= tol (gradient of the negated
        objective, corr - G a - pen).
    max_sweeps : int
        Upper bound on cyclic passes.

    Returns
    -------
    residual_sq : ndarray, shape (n,)
        ||x_j - D a_j||^2 at the solution.
    nnz : ndarray, shape (n,)
        Number of strictly positive coefficients per column.
    sweeps : int
        Cyclic passes actually performed.
    """
    gram = np.asarray(gram, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    penalties = np.asarray(penalties, dtype=np.float64)
    xsq = np.asarray(xsq, dtype=np.float64)
    tol = np.asarray(tol, dtype=np.float64)
    p, n = corr.shape
    if gram.shape != (p, p) or penalties.shape != (p, n) or coefs.shape != (p, n):
        raise ValueError("inconsistent problem shapes")
    if xsq.shape != (n,) or tol.shape != (n,):
        raise ValueError("xsq and tol must have one entry per column")

    diag = np.ascontiguousarray(np.diag(gram))
    live_atoms = diag > 1e-12  # atoms with ~zero norm never activate
    q = gram @ coefs  # running G a, updated with every coordinate move
    active = np.ones(n, dtype=bool)
    # a quiet sweep still moves coordinates, so stationarity is certified
    # by a follow-up measure-only sweep at the frozen point
    verify = np.zeros(n, dtype=bool)

    sweeps = 0
    while sweeps < max_sweeps and active.any():
        sweeps += 1
        cols = np.flatnonzero(active)
        vmask = verify[cols]
        vcols = cols[vmask]
        if vcols.size:
            # the running q drifts by accumulated rounding; certify the
            # frozen points against an exactly rebuilt gradient
            q[:, vcols] = gram @ coefs[:, vcols]
        viol = np.zeros(cols.size)
        for k in range(p):
            if not live_atoms[k]:
                continue
            grad = corr[k, cols] - q[k, cols] - penalties[k, cols]
            ak = coefs[k, cols]
            viol = np.maximum(viol, np.where(ak > 0.0, np.abs(grad), np.maximum(grad, 0.0)))
            new = np.maximum(ak + grad / diag[k], 0.0)
            delta = np.where(vmask, 0.0, new - ak)
            moved = delta != 0.0
            if moved.any():
                mcols = cols[moved]
                q[:, mcols] += gram[:, k, None] * delta[moved]
                coefs[k, mcols] = new[moved]
        quiet = viol <= tol[cols]
        active[cols[vmask & quiet]] = False
        verify[cols] = quiet & ~vmask

    residual_sq = xsq - 2.0 * np.einsum("kj,kj->j", corr, coefs) + np.einsum(
        "kj,kj->j", coefs, q
    )
    np.maximum(residual_sq, 0.0, out=residual_sq)
    nnz = np.count_nonzero(coefs > 0.0, axis=0).astype(np.int64)
    return residual_sq, nnz, sweeps
