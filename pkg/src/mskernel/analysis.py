"""Diagnostics and theoretical bounds for the multiscale system.

Covers the condition-number bound of the Gram matrices and the decay rate
``theta`` derived from it, the norm bound for ``M = id - T'``, truncation
sweeps over ``T``, the truncation-radius rule, condition estimates, a
brute-force check of the path-sum formula for ``T'^{-1}``, and an empirical
probe of the off-diagonal decay of ``A^{-1}``.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .assembly import (DEFAULT_THRESHOLD_TOL, NNZ_ATOL, BlockSystem, SparseKernelMatrix,
                       ThresholdedCoupling, assemble_thresholded, dense_coupling)
from .geometry import HierarchyParams, LevelHierarchy, validate_hierarchy
from .krylov import cg
from .parallel import WorkerPool, as_pool

POWER_SEED = 20240607
DENSE_NORM_LIMIT = 2000
SERIES_DIRECT_LIMIT = 1_000_000


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


# --------------------------------------------------------------------------
# constants
# --------------------------------------------------------------------------

def M_d(d: int) -> float:
    """``12 (pi Gamma(d/2+1)^2 / 9)^(1/(d+1))``."""
    return 12.0 * (math.pi * math.gamma(d / 2 + 1) ** 2 / 9.0) ** (1.0 / (d + 1))


def C_d(d: int) -> float:
    """``(M_d / 2^(3/2))^d / (2 Gamma(d/2+1))``."""
    return (M_d(d) / 2**1.5) ** d / (2.0 * math.gamma(d / 2 + 1))


def condition_bound(params: HierarchyParams, c_phi: float = 1.0) -> float:
    """Level-independent bound ``z`` on ``kappa_2(A_l)``."""
    d, nu, c_q, tau = params.d, params.nu, params.c_q, params.tau
    return 4.0**d / (C_d(d) * c_phi) * (1.0 + 4.0 * M_d(d) ** 2 * nu**2 * c_q**2) ** tau


def decay_radius(params: HierarchyParams) -> float:
    """``R = sqrt(d) max(c_q nu, 4)``."""
    return math.sqrt(params.d) * max(params.c_q * params.nu, 4.0)


def theta_from_z(z: float, R: float) -> float:
    """``-log((sqrt z - 1)/(sqrt z + 1)) / (2R)``, evaluated without cancellation."""
    if not z > 1:
        raise ValueError(f"condition bound z must exceed 1, got {z} (inconsistent c_phi?)")
    if R <= 0:
        raise ValueError("R must be positive")
    s = math.sqrt(z)
    # log((s-1)/(s+1)) = log1p(-2/(s+1))
    return -math.log1p(-2.0 / (s + 1.0)) / (2.0 * R)


def eulerian_polynomial(d: int) -> np.ndarray:
    """Coefficients ``A(d, k)``, ``k = 0..d-1``, of the Eulerian polynomial."""
    return np.array([
        sum((-1) ** j * math.comb(d + 1, j) * (k + 1 - j) ** d for j in range(k + 1))
        for k in range(d)
    ], dtype=float)


def c_sigma_direct(d: int, theta: float, rel: float = 1e-16, max_terms: int = SERIES_DIRECT_LIMIT) -> float:
    """``sum_{m>=0} (m+2)^d exp(-theta m)``, stopped once a term is below ``rel`` times the sum.

    Terms grow until ``m + 2 = d / theta`` so the stop rule only applies past
    the peak.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    peak = d / theta
    total = 0.0
    for m in range(max_terms):
        term = (m + 2) ** d * math.exp(-theta * m)
        total += term
        if m + 2 > peak and term < rel * total:
            return total
    raise OverflowError(f"series did not settle within {max_terms} terms (theta = {theta:.3g})")


def c_sigma_closed(d: int, theta: float) -> float:
    """Closed form through the polylogarithm of negative order.

    With ``x = exp(-theta)``, ``sum_{n>=1} n^d x^n = x A_d(x) / (1-x)^(d+1)``,
    and the series equals that sum without its ``n = 1`` term, divided by ``x^2``.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    x = math.exp(-theta)
    one_minus_x = -math.expm1(-theta)
    coeffs = eulerian_polynomial(d)
    poly = float(np.polyval(coeffs[::-1], x))
    li = x * poly / one_minus_x ** (d + 1)
    return (li - x) / x**2


def c_sigma(d: int, theta: float) -> float:
    """Direct summation when it needs at most a million terms, closed form otherwise."""
    est_terms = (d + 40) / theta if theta > 0 else math.inf
    if est_terms <= SERIES_DIRECT_LIMIT:
        return c_sigma_direct(d, theta)
    return c_sigma_closed(d, theta)


@dataclass(frozen=True)
class BoundConstants:
    c_phi: float
    C_phi: float
    M_d: float
    C_d: float
    z: float
    R: float
    theta: float
    C_Sigma: float
    C_cg: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def compute_theta(params: HierarchyParams, consts: BoundConstants | None = None,
                  c_phi: float | None = None) -> float:
    c_phi = c_phi if c_phi is not None else (consts.c_phi if consts is not None else 1.0)
    return theta_from_z(condition_bound(params, c_phi), decay_radius(params))


def bound_constants(params: HierarchyParams, c_phi: float = 1.0, C_phi: float = 1.0) -> BoundConstants:
    if c_phi <= 0 or C_phi <= 0:
        raise ValueError("Fourier constants must be positive")
    z = condition_bound(params, c_phi)
    R = decay_radius(params)
    theta = theta_from_z(z, R)
    s = math.sqrt(z)
    return BoundConstants(
        c_phi=c_phi, C_phi=C_phi, M_d=M_d(params.d), C_d=C_d(params.d), z=z, R=R, theta=theta,
        C_Sigma=c_sigma(params.d, theta), C_cg=(s - 1.0) / (s + 1.0),
    )


def observed_params(hierarchy: LevelHierarchy) -> HierarchyParams:
    """Hierarchy parameters with ``c_q`` and ``c_h`` replaced by their observed values."""
    rep = validate_hierarchy(hierarchy)
    c_h = hierarchy.params.c_h if rep.c_h_observed is None else min(1.0, rep.c_h_observed)
    return replace(hierarchy.params, c_q=max(1.0, rep.c_q_observed), c_h=c_h)


# --------------------------------------------------------------------------
# norm of M and its bound
# --------------------------------------------------------------------------

def _operator(obj):
    """``(n, matvec, rmatvec, dense_or_None)`` for the supported operator types."""
    if isinstance(obj, ThresholdedCoupling):
        sizes = obj.hierarchy.sizes
        cuts = np.cumsum(sizes)[:-1]
        n = sum(sizes)

        def mv(v):
            return np.concatenate(obj.apply_M(np.split(v, cuts)))

        def rmv(v):
            return np.concatenate(obj.apply_MT(np.split(v, cuts)))

        return n, n, mv, rmv, (lambda: obj.to_dense())
    if isinstance(obj, SparseKernelMatrix):
        obj = obj.csr
    if sp.issparse(obj):
        m = obj.tocsr()
        return m.shape[0], m.shape[1], (lambda v: m @ v), (lambda v: m.T @ v), (lambda: m.toarray())
    arr = np.asarray(obj, dtype=float)
    return arr.shape[0], arr.shape[1], (lambda v: arr @ v), (lambda v: arr.T @ v), (lambda: arr)


def power_iteration(matvec, n: int, rtol: float = 1e-10, max_iter: int = 10000,
                    seed: int = POWER_SEED) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite operator."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return 0.0
        v = w / wn
        if lam_new > 0 and abs(lam_new - lam) <= rtol * lam_new:
            return lam_new
        lam = lam_new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps", lam)


def matrix_two_norm(op, dense_limit: int = DENSE_NORM_LIMIT, rtol: float = 1e-10,
                    max_iter: int = 10000, seed: int = POWER_SEED) -> float:
    """Spectral norm: dense SVD up to ``dense_limit`` rows, else power iteration on ``M^T M``."""
    n_rows, n_cols, mv, rmv, dense = _operator(op)
    if n_rows == 0 or n_cols == 0:
        return 0.0
    if max(n_rows, n_cols) <= dense_limit:
        arr = dense()
        if not np.any(arr):
            return 0.0
        return float(np.linalg.norm(arr, 2))
    lam = power_iteration(lambda v: rmv(mv(v)), n_cols, rtol, max_iter, seed)
    return math.sqrt(max(lam, 0.0))


@dataclass(frozen=True)
class MNormBound:
    L: int
    value: float
    one_norm_bound: float
    inf_norm_bound: float
    C: float
    C_Sigma: float
    calibrated: bool = False


def prefactor_C(params: HierarchyParams, consts: BoundConstants) -> float:
    d, nu, c_q, tau, th = params.d, params.nu, params.c_q, params.tau, consts.theta
    return (2.0 / (consts.C_d * consts.c_phi) * (1.0 + consts.C_phi * c_q**2 * nu**2) ** tau
            * math.exp(2.0 * th * math.sqrt(d)) * math.exp(c_q * nu * th) * (1.0 + nu * c_q) ** d)


def m_norm_bound(params: HierarchyParams, consts: BoundConstants, L: int,
                 prefactor: float | None = None) -> MNormBound:
    """Bound on ``||M||_2`` from the geometric mean of the 1- and infinity-norm bounds.

    ``prefactor``, when given, replaces the constant ``C C_Sigma sqrt(2 c_q^-d)``
    so that the level dependence can be compared against a calibrated curve.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    d, mu, c_h, c_q = params.d, params.mu, params.c_h, params.c_q
    C = prefactor_C(params, consts)
    CS = consts.C_Sigma
    one = 2.0 * C * CS * c_q ** (-d) * c_h ** (-d * L) * mu ** (-d * (L - 1))
    inf = C * CS * L
    growth = math.sqrt(L) * c_h ** (-d * L / 2) * mu ** (-d * (L - 1) / 2)
    if prefactor is None:
        value = C * CS * math.sqrt(2.0 * c_q ** (-d)) * growth
    else:
        value = prefactor * growth
    return MNormBound(L, value, one, inf, C, CS, calibrated=prefactor is not None)


# --------------------------------------------------------------------------
# truncation
# --------------------------------------------------------------------------

@dataclass
class TruncationReport:
    L: int
    T_values: list
    norm_ratio: list
    nnz_ratio: list
    M_norm: float
    M_norm_bound: float | None = None
    nnz_full: int = 0
    nnz_truncated: list = field(default_factory=list)

    def rows(self):
        return [(self.L, T, r, z) for T, r, z in zip(self.T_values, self.norm_ratio, self.nnz_ratio)]

    def write_csv(self, path, append: bool = False) -> None:
        write_table(path, ["L", "T", "norm_ratio", "nnz_ratio"], self.rows(), append=append)


def fmt12(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    v = float(v)
    if math.isinf(v):
        return "full" if v > 0 else "-inf"
    return "%.12g" % v


def write_table(path, header, rows, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt12(v) for v in row])


def truncation_sweep(system: BlockSystem, T_list, tol: float = DEFAULT_THRESHOLD_TOL,
                     pool: WorkerPool | None = None, full: ThresholdedCoupling | None = None,
                     atol: float = NNZ_ATOL, bound: float | None = None) -> TruncationReport:
    """Norm and sparsity of ``M~(T)`` relative to ``M`` for each ``T``.

    ``M`` is built once with ``T = inf``; each ``M~(T)`` masks it, which gives
    the same entries as re-solving with the same tolerance. Entry counts only
    include magnitudes of at least ``atol``.
    """
    pool = as_pool(pool)
    full = full if full is not None else assemble_thresholded(system, math.inf, tol, pool)
    m_norm = matrix_two_norm(full)
    nnz_full = full.nnz(atol)
    T_list = [float(T) for T in T_list]

    def one(T):
        trunc = full.restrict(T)
        diff = full.difference(trunc)
        ratio = matrix_two_norm(diff) / m_norm if m_norm > 0 else 0.0
        return ratio, trunc.nnz(atol)

    out = pool.map(one, T_list)
    return TruncationReport(
        L=system.L, T_values=T_list, norm_ratio=[o[0] for o in out],
        nnz_ratio=[o[1] / nnz_full if nnz_full else 1.0 for o in out],
        M_norm=m_norm, M_norm_bound=bound, nnz_full=nnz_full, nnz_truncated=[o[1] for o in out],
    )


@dataclass(frozen=True)
class TruncationRadius:
    L: int
    T: float
    theta: float
    decay_condition: bool
    large_L_condition: bool
    L_squared_threshold: float
    L_threshold_met: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def select_truncation_radius(params: HierarchyParams, consts: BoundConstants, L: int) -> TruncationRadius:
    """``T = -4 d L^2 ln(c_h mu) / theta`` with the side conditions evaluated in log form."""
    th = consts.theta
    if not th > 0:
        raise ValueError(f"theta must be positive, got {th}")
    d, c_h, mu, c_q = params.d, params.c_h, params.mu, params.c_q
    lr = math.log(c_h * mu)
    if lr >= 0:
        raise ValueError("c_h * mu must be < 1")
    T = -4.0 * d * L**2 * lr / th
    decay = d * math.log(T) <= th * T / 2
    C = prefactor_C(params, consts)
    lhs = (math.log(2.0 * C * consts.C_Sigma * L) + th / L
           + (d / (2.0 * L) - d / 2.0) * math.log(c_q))
    rhs = -d * L / 2.0 * lr
    thr = -math.log(2.0 * d / th) / lr
    return TruncationRadius(L, T, th, bool(decay), bool(lhs <= rhs), thr, bool(L**2 >= thr))


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionReport:
    lambda_max: float
    lambda_min: float
    kappa: float
    bound: float | None


def condition_diagnostics(A, params: HierarchyParams | None = None, c_phi: float = 1.0,
                          rtol: float = 1e-9, cg_tol: float = 1e-12, max_iter: int = 20000,
                          seed: int = POWER_SEED) -> ConditionReport:
    """``kappa_2`` from power iteration on ``A`` and on ``A^{-1}`` (inner CG solves)."""
    csr = A.csr if isinstance(A, SparseKernelMatrix) else sp.csr_matrix(A)
    n = csr.shape[0]
    lam_max = power_iteration(lambda v: csr @ v, n, rtol, max_iter, seed)
    inv = power_iteration(lambda v: cg(lambda x: csr @ x, v, cg_tol, max(500, 10 * n))[0],
                          n, rtol, max_iter, seed + 1)
    lam_min = 1.0 / inv
    bound = condition_bound(params, c_phi) if params is not None else None
    return ConditionReport(lam_max, lam_min, lam_max / lam_min, bound)


# --------------------------------------------------------------------------
# explicit inverse of T'
# --------------------------------------------------------------------------

def decreasing_paths(k: int, j: int):
    """All strictly decreasing index tuples from ``k`` down to ``j``."""
    inner = range(j + 1, k)
    for r in range(len(inner) + 1):
        for mid in itertools.combinations(sorted(inner, reverse=True), r):
            yield (k, *mid, j)


def path_sum_inverse(X: dict, sizes) -> np.ndarray:
    """``T'^{-1}`` assembled from signed products along decreasing index paths."""
    L = len(sizes)
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    out = np.eye(off[-1])
    for k in range(2, L + 1):
        for j in range(1, k):
            blk = np.zeros((sizes[k - 1], sizes[j - 1]))
            for p in decreasing_paths(k, j):
                prod = X[(p[0], p[1])]
                for a, b in zip(p[1:-1], p[2:]):
                    prod = prod @ X[(a, b)]
                blk += (-1) ** (len(p) - 1) * prod
            out[off[k - 1]:off[k], off[j - 1]:off[j]] = blk
    return out


def dense_T_prime(X: dict, sizes) -> np.ndarray:
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    T = np.eye(off[-1])
    for (k, j), blk in X.items():
        T[off[k - 1]:off[k], off[j - 1]:off[j]] = blk
    return T


@dataclass
class ExplicitInverseReport:
    L: int
    n_total: int
    n_paths: int
    path_error: float
    neumann_error: float
    nilpotency_error: float
    previous_power_norm: float
    tol: float
    block_errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return max(self.path_error, self.neumann_error, self.nilpotency_error) <= self.tol

    def as_dict(self) -> dict:
        return {
            "L": self.L, "n_total": self.n_total, "n_paths": self.n_paths,
            "path_error": self.path_error, "neumann_error": self.neumann_error,
            "nilpotency_error": self.nilpotency_error,
            "previous_power_norm": self.previous_power_norm, "tol": self.tol,
            "block_errors": {f"{k},{j}": v for (k, j), v in self.block_errors.items()},
            "passed": self.passed,
        }


def verify_explicit_inverse(system: BlockSystem, tol: float = 1e-8, max_points: int = 600) -> ExplicitInverseReport:
    """Compare the path-sum formula and the Neumann series with a dense inverse of ``T'``.

    Errors are maximum absolute entry differences scaled by the largest entry
    of the dense inverse.
    """
    hier = system.hierarchy
    if hier.n_total > max_points:
        raise ValueError(f"explicit inverse check is dense; N = {hier.n_total} exceeds {max_points}")
    sizes = hier.sizes
    L = hier.L
    off = hier.offsets
    X = dense_coupling(system)
    Tp = dense_T_prime(X, sizes)
    ref = np.linalg.inv(Tp)
    scale = max(1.0, float(np.abs(ref).max()))
    paths = path_sum_inverse(X, sizes)
    block_errors = {}
    for k in range(2, L + 1):
        for j in range(1, k):
            sl = (slice(off[k - 1], off[k]), slice(off[j - 1], off[j]))
            block_errors[(k, j)] = float(np.abs(paths[sl] - ref[sl]).max()) / scale
    M = np.eye(hier.n_total) - Tp
    neumann = np.eye(hier.n_total)
    power = np.eye(hier.n_total)
    prev_norm = 0.0
    for _ in range(1, L):
        power = power @ M
        neumann += power
    prev_norm = float(np.abs(power).max()) if L > 1 else 1.0
    power = power @ M
    n_paths = sum(1 for k in range(2, L + 1) for j in range(1, k) for _ in decreasing_paths(k, j))
    return ExplicitInverseReport(
        L=L, n_total=hier.n_total, n_paths=n_paths,
        path_error=float(np.abs(paths - ref).max()) / scale,
        neumann_error=float(np.abs(neumann - ref).max()) / scale,
        nilpotency_error=float(np.abs(power).max()) / max(1.0, float(np.abs(M).max())),
        previous_power_norm=prev_norm, tol=tol, block_errors=block_errors,
    )


# --------------------------------------------------------------------------
# decay of A^{-1}
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayReport:
    level: int
    columns: tuple
    theta_emp: float
    intercept: float
    correlation: float
    diagonal_dominant: bool
    n_points_fit: int

    @property
    def passed(self) -> bool:
        return self.theta_emp > 0 and self.correlation <= -0.9 and self.diagonal_dominant


def lagrange_decay_probe(A, points: np.ndarray, q: float, columns=None, n_columns: int = 6,
                         seed: int = POWER_SEED, cg_tol: float = 1e-13, floor: float = 1e-10,
                         level: int = 0, max_points: int = 5000) -> DecayReport:
    """Fit ``log max|A^{-1}_{ij}|`` per unit shell of ``|x_i - x_j| / q`` against the shell radius.

    Columns ``j`` of ``A^{-1}`` come from CG solves with unit right-hand sides.
    Entries below ``floor`` times the column maximum are left out, as they sit
    at the level of the solve tolerance. The distance-0 entry is never fitted.
    """
    csr = A.csr if isinstance(A, SparseKernelMatrix) else sp.csr_matrix(A)
    n = csr.shape[0]
    if n > max_points:
        raise ValueError(f"decay probe limited to {max_points} points, got {n}")
    if columns is None:
        rng = np.random.default_rng(seed)
        columns = rng.choice(n, size=min(n_columns, n), replace=False)
    columns = tuple(int(c) for c in columns)
    xs, ys = [], []
    diag_ok = True
    for j in columns:
        e = np.zeros(n)
        e[j] = 1.0
        col, _, _ = cg(lambda v: csr @ v, e, cg_tol, max(500, 10 * n))
        mag = np.abs(col)
        diag_ok &= bool(mag[j] >= mag.max())
        dist = np.linalg.norm(points - points[j], axis=1) / q
        shell = np.floor(dist + 1e-9).astype(int)
        keep = (dist > 0) & (mag > floor * mag.max())
        for s in np.unique(shell[keep]):
            sel = keep & (shell == s)
            xs.append(float(s))
            ys.append(math.log(mag[sel].max()))
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if xs.size < 3 or np.ptp(xs) == 0:
        return DecayReport(level, columns, math.nan, math.nan, math.nan, diag_ok, int(xs.size))
    slope, intercept = np.polyfit(xs, ys, 1)
    corr = float(np.corrcoef(xs, ys)[0, 1])
    return DecayReport(level, columns, float(-slope), float(intercept), corr, diag_ok, int(xs.size))
