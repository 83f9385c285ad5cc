"""Unpreconditioned conjugate gradients for symmetric positive definite systems.

Both routines stop on the relative 2-norm residual ``||b - A x|| / ||b||``.
The multi-right-hand-side variant runs independent CG recurrences column by
column, sharing only the sparse products, so column ``j`` of the result does
not depend on which other columns were solved alongside it up to round-off
in a fixed batch layout.
"""
from __future__ import annotations

import math

import numpy as np

from .parallel import dot


class CGConvergenceError(RuntimeError):
    """CG hit its iteration limit; carries enough context to locate the solve."""

    def __init__(self, message: str, *, level=None, block=None, row=None,
                 residual: float = math.nan, iterations: int = 0):
        super().__init__(message)
        self.level = level
        self.block = block
        self.row = row
        self.residual = residual
        self.iterations = iterations


def default_max_iter(n: int) -> int:
    return max(200, int(math.ceil(10 * math.sqrt(max(n, 1)))))


def cg(matvec, b: np.ndarray, tol: float, max_iter: int | None = None, x0=None,
       deterministic: bool = True):
    """Solve ``A x = b`` with ``matvec(v) = A v``.

    Returns ``(x, iterations, relative_residual)``. A zero right-hand side
    returns the zero vector after 0 iterations. Raises
    :class:`CGConvergenceError` when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    max_iter = default_max_iter(n) if max_iter is None else int(max_iter)
    bnorm = math.sqrt(dot(b, b, deterministic))
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - matvec(x)
    rr = dot(r, r, deterministic)
    relres = math.sqrt(rr) / bnorm
    if relres <= tol:
        return x, 0, relres
    p = r.copy()
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = dot(p, Ap, deterministic)
        if pAp <= 0.0:
            raise CGConvergenceError(f"matrix is not positive definite (p'Ap = {pAp:.3e})",
                                     residual=relres, iterations=it)
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = dot(r, r, deterministic)
        relres = math.sqrt(rr_new) / bnorm
        if relres <= tol:
            return x, it, relres
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise CGConvergenceError(
        f"CG did not reach tol {tol:.3e} in {max_iter} iterations (residual {relres:.3e})",
        residual=relres, iterations=max_iter)


def cg_multi(A, B: np.ndarray, tol: float, max_iter: int | None = None):
    """Solve ``A X = B`` column by column with vectorised CG.

    ``A`` is anything supporting ``A @ dense_matrix``. Returns
    ``(X, iterations, relative_residuals)`` with per-column counts. Raises
    :class:`CGConvergenceError` with ``row`` set to the first failing column.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    n, m = B.shape
    max_iter = default_max_iter(n) if max_iter is None else int(max_iter)
    X = np.zeros((n, m))
    iters = np.zeros(m, dtype=int)
    bnorm = np.sqrt(np.einsum("ij,ij->j", B, B))
    relres = np.zeros(m)
    active = np.flatnonzero(bnorm > 0)
    if active.size == 0:
        return X, iters, relres
    R = B[:, active].copy()
    P = R.copy()
    Xa = np.zeros_like(R)
    rr = np.einsum("ij,ij->j", R, R)
    bn = bnorm[active]
    for it in range(1, max_iter + 1):
        AP = np.asarray(A @ P)
        pAp = np.einsum("ij,ij->j", P, AP)
        if np.any(pAp <= 0):
            raise CGConvergenceError("matrix is not positive definite", iterations=it)
        alpha = rr / pAp
        Xa += alpha * P
        R -= alpha * AP
        rr_new = np.einsum("ij,ij->j", R, R)
        res = np.sqrt(rr_new) / bn
        done = res <= tol
        if np.any(done):
            idx = active[done]
            X[:, idx] = Xa[:, done]
            iters[idx] = it
            relres[idx] = res[done]
            keep = ~done
            active, Xa, R, P = active[keep], Xa[:, keep], R[:, keep], P[:, keep]
            rr, rr_new, bn = rr[keep], rr_new[keep], bn[keep]
            if active.size == 0:
                return X, iters, relres
        P = R + (rr_new / rr) * P
        rr = rr_new
    worst = int(active[0])
    raise CGConvergenceError(
        f"CG did not reach tol {tol:.3e} in {max_iter} iterations for column {worst}",
        row=worst, residual=float(np.max(np.sqrt(rr) / bn)), iterations=max_iter)
