"""Monolithic solve of ``T_L alpha = f`` via ``T' beta = f`` and ``D alpha = beta``.

``T' = T D^{-1}`` is unit block-lower-triangular, so ``M = id - T'`` is
nilpotent of index ``L`` and the Jacobi sweep ``beta <- f + M beta`` is exact
after ``L`` steps from any start. ``D`` is block diagonal with the Gram
matrices ``A_l``, which are solved independently by CG.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import DEFAULT_THRESHOLD_TOL, BlockSystem, ThresholdedCoupling, assemble_thresholded
from .geometry import LevelHierarchy
from .krylov import CGConvergenceError, cg, default_max_iter
from .parallel import WorkerPool, as_pool

JACOBI_MODES = ("matrix_free", "thresholded")
INITIAL_GUESSES = ("zero", "rhs")
INNER_SOLVERS = ("cg", "direct")
STOPPING_RULES = ("uniform", "level-weighted")


class BlockVector:
    """One vector per level, lengths fixed by the hierarchy."""

    __slots__ = ("parts",)

    def __init__(self, parts):
        self.parts = tuple(np.asarray(p, dtype=float) for p in parts)
        for p in self.parts:
            if p.ndim != 1:
                raise ValueError("block vector parts must be 1-D")

    @classmethod
    def zeros(cls, sizes) -> "BlockVector":
        return cls([np.zeros(n) for n in sizes])

    @classmethod
    def from_flat(cls, flat, sizes) -> "BlockVector":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (sum(sizes),):
            raise ValueError(f"expected length {sum(sizes)}, got {flat.shape}")
        cuts = np.cumsum(sizes)[:-1]
        return cls(np.split(flat, cuts))

    @classmethod
    def sample(cls, hierarchy: LevelHierarchy, fn) -> "BlockVector":
        """``f|X_l`` for every level; ``fn`` maps an ``(n, d)`` array to ``n`` values."""
        return cls([np.asarray(fn(lv.points), dtype=float).reshape(-1) for lv in hierarchy.levels])

    def check(self, sizes) -> "BlockVector":
        if [p.size for p in self.parts] != list(sizes):
            raise ValueError(f"block sizes {[p.size for p in self.parts]} do not match hierarchy {list(sizes)}")
        return self

    @property
    def sizes(self) -> list[int]:
        return [p.size for p in self.parts]

    @property
    def L(self) -> int:
        return len(self.parts)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.parts) if self.parts else np.zeros(0)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def __getitem__(self, ell: int) -> np.ndarray:
        """1-based level access."""
        if not 1 <= ell <= len(self.parts):
            raise IndexError(f"level {ell} outside 1..{len(self.parts)}")
        return self.parts[ell - 1]

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def __add__(self, other):
        return BlockVector([a + b for a, b in zip(self.parts, other.parts)])

    def __sub__(self, other):
        return BlockVector([a - b for a, b in zip(self.parts, other.parts)])

    def __mul__(self, s: float):
        return BlockVector([s * a for a in self.parts])

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"BlockVector(sizes={self.sizes})"


@dataclass(frozen=True)
class SolverConfig:
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    jacobi_mode: str = "matrix_free"
    T: float | None = None
    jacobi_initial: str = "zero"
    inner_tol: float | None = None
    inner_solver: str = "cg"
    stopping: str = "uniform"
    threshold_tol: float = DEFAULT_THRESHOLD_TOL
    workers: int | str = 1
    deterministic: bool = True

    def __post_init__(self):
        if not 0 < self.cg_tol < 1:
            raise ValueError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.jacobi_mode not in JACOBI_MODES:
            raise ValueError(f"jacobi_mode must be one of {JACOBI_MODES}")
        if self.jacobi_initial not in INITIAL_GUESSES:
            raise ValueError(f"jacobi_initial must be one of {INITIAL_GUESSES}")
        if self.inner_solver not in INNER_SOLVERS:
            raise ValueError(f"inner_solver must be one of {INNER_SOLVERS}")
        if self.stopping not in STOPPING_RULES:
            raise ValueError(f"stopping must be one of {STOPPING_RULES}")
        if self.jacobi_mode == "thresholded" and not (self.T is not None and self.T > 0):
            raise ValueError("thresholded mode needs a positive T (math.inf for no truncation)")
        if self.inner_tol is not None and not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")

    @property
    def effective_inner_tol(self) -> float:
        return self.cg_tol / 10 if self.inner_tol is None else self.inner_tol

    def level_tolerances(self, hierarchy: LevelHierarchy) -> list[float]:
        """Per-level CG tolerances; the weighted rule scales by ``q_l^{d/2} / sqrt(L)``."""
        L = hierarchy.L
        if self.stopping == "uniform":
            return [self.cg_tol] * L
        d = hierarchy.params.d
        return [self.cg_tol * lv.q ** (d / 2) / math.sqrt(L) for lv in hierarchy.levels]

    def max_iter(self, n: int) -> int:
        return default_max_iter(n) if self.cg_max_iter is None else int(self.cg_max_iter)

    def as_dict(self) -> dict:
        out = asdict(self)
        if out["T"] is not None and math.isinf(out["T"]):
            out["T"] = "full"
        return out


@dataclass
class MultiscaleSolution:
    alpha: BlockVector
    iterations: list
    jacobi_steps: int
    residuals: list
    mode: SolverConfig
    beta: BlockVector | None = None
    inner_iterations: int = 0
    timings: dict = field(default_factory=dict)
    algorithm: str = "monolithic"

    @property
    def L(self) -> int:
        return self.alpha.L

    def metadata(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "L": self.L,
            "sizes": self.alpha.sizes,
            "iterations": [int(i) for i in self.iterations],
            "residuals": [float(r) for r in self.residuals],
            "jacobi_steps": int(self.jacobi_steps),
            "inner_iterations": int(self.inner_iterations),
            "timings": {k: float(v) for k, v in self.timings.items()},
            "config": self.mode.as_dict(),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "point_index", "coefficient"])
            for ell, part in enumerate(self.alpha.parts, start=1):
                for i, v in enumerate(part):
                    w.writerow([ell, i, "%.17g" % v])


def read_coefficients_csv(path, sizes=None) -> BlockVector:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    L = max(int(r["level"]) for r in rows) if rows else 0
    parts = [[] for _ in range(L)]
    for r in rows:
        parts[int(r["level"]) - 1].append((int(r["point_index"]), float(r["coefficient"])))
    vec = BlockVector([[v for _, v in sorted(p)] for p in parts])
    return vec.check(sizes) if sizes is not None else vec


def _cg_level(A, b, tol, max_iter, pool, deterministic, level):
    try:
        return cg(lambda v: A.matvec(v, pool), b, tol, max_iter, deterministic=deterministic)
    except CGConvergenceError as exc:
        raise CGConvergenceError(f"level {level}: {exc}", level=level,
                                 residual=exc.residual, iterations=exc.iterations) from exc


def block_cg_solve(diag, rhs: BlockVector, tol, max_iter=None, pool: WorkerPool | None = None,
                   deterministic: bool = True):
    """Solve ``A_l alpha_l = rhs_l`` for every level, levels in parallel.

    ``tol`` is a scalar or a per-level list; ``max_iter`` likewise (``None``
    uses ``max(200, 10 sqrt(n))``). Returns ``(alpha, iterations, residuals)``.
    """
    pool = as_pool(pool)
    L = len(diag)
    tols = list(tol) if np.ndim(tol) else [tol] * L
    iters = list(max_iter) if np.ndim(max_iter) else [max_iter] * L
    if len(rhs) != L:
        raise ValueError(f"{len(rhs)} right-hand sides for {L} blocks")

    def work(ell):
        A = diag[ell - 1]
        mi = iters[ell - 1] if iters[ell - 1] is not None else default_max_iter(A.n_rows)
        return _cg_level(A, rhs[ell], tols[ell - 1], mi, pool, deterministic, ell)

    out = pool.map(work, range(1, L + 1))
    return BlockVector([o[0] for o in out]), [o[1] for o in out], [o[2] for o in out]


class _InnerSolver:
    """``A_l^{-1} v`` by CG or by a cached sparse LU factorisation."""

    def __init__(self, system: BlockSystem, cfg: SolverConfig, pool: WorkerPool):
        self.system = system
        self.cfg = cfg
        self.pool = pool
        self.iterations = 0
        self._lu = {}
        if cfg.inner_solver == "direct":
            for ell in range(1, system.L):
                self._lu[ell] = spla.splu(system.A(ell).csr.tocsc())

    def __call__(self, ell: int, v: np.ndarray) -> np.ndarray:
        if self.cfg.inner_solver == "direct":
            return self._lu[ell].solve(v)
        A = self.system.A(ell)
        x, it, _ = _cg_level(A, v, self.cfg.effective_inner_tol, self.cfg.max_iter(A.n_rows),
                             self.pool, self.cfg.deterministic, ell)
        self.iterations += it
        return x


def _matrix_free_M(system: BlockSystem, inner: _InnerSolver, beta: BlockVector, pool: WorkerPool):
    """``(id - T') beta`` blockwise: block ``j`` is ``-sum_{l<j} B_{j,l} A_l^{-1} beta_l``."""
    L = system.L
    z = pool.map(lambda ell: inner(ell, beta[ell]), range(1, L))

    def row(j):
        out = np.zeros(beta[j].size)
        for ell in range(1, j):
            out -= system.B(j, ell).matvec(z[ell - 1], pool)
        return out

    return BlockVector(pool.map(row, range(1, L + 1)))


def jacobi_triangular_solve(system, f: BlockVector, cfg: SolverConfig | None = None,
                            coupling: ThresholdedCoupling | None = None, steps: int | None = None,
                            pool: WorkerPool | None = None, info: dict | None = None) -> BlockVector:
    """Jacobi sweeps ``beta <- f + (id - T') beta`` on the unit lower triangular ``T'``.

    ``system`` is a :class:`BlockSystem` (matrix-free or thresholded mode) or
    directly a :class:`ThresholdedCoupling`. ``steps`` defaults to ``L``, after
    which the iteration is exact. ``info``, if given, receives the inner
    iteration count.
    """
    cfg = cfg or SolverConfig()
    pool = as_pool(pool)
    if isinstance(system, ThresholdedCoupling):
        coupling, hier = system, system.hierarchy
        apply_M = lambda b: BlockVector(coupling.apply_M(b.parts, pool))  # noqa: E731
        inner = None
    else:
        hier = system.hierarchy
        if cfg.jacobi_mode == "thresholded":
            if coupling is None:
                coupling = assemble_thresholded(system, cfg.T, cfg.threshold_tol, pool)
            apply_M = lambda b: BlockVector(coupling.apply_M(b.parts, pool))  # noqa: E731
            inner = None
        else:
            inner = _InnerSolver(system, cfg, pool)
            apply_M = lambda b: _matrix_free_M(system, inner, b, pool)  # noqa: E731
    f = f.check(hier.sizes)
    L = hier.L
    steps = L if steps is None else int(steps)
    beta = BlockVector.zeros(hier.sizes) if cfg.jacobi_initial == "zero" else BlockVector(f.parts)
    for s in range(steps):
        if s == 0 and cfg.jacobi_initial == "zero":
            beta = BlockVector(f.parts)
            continue
        beta = f + apply_M(beta)
    if info is not None:
        info["inner_iterations"] = inner.iterations if inner is not None else 0
        info["steps"] = steps
    return beta


def _make_pool(cfg: SolverConfig, pool):
    if pool is not None:
        return as_pool(pool), False
    if cfg.workers in (1, "1"):
        return as_pool(None), False
    return WorkerPool(cfg.workers, cfg.deterministic), True


def solve_monolithic(system: BlockSystem, f: BlockVector, cfg: SolverConfig | None = None,
                     coupling: ThresholdedCoupling | None = None,
                     pool: WorkerPool | None = None) -> MultiscaleSolution:
    """``T' beta = f`` by Jacobi, then ``A_l alpha_l = beta_l`` by block CG."""
    cfg = cfg or SolverConfig()
    pool, owned = _make_pool(cfg, pool)
    try:
        timings = {}
        hier = system.hierarchy
        if cfg.jacobi_mode == "thresholded" and coupling is None:
            t0 = time.perf_counter()
            coupling = assemble_thresholded(system, cfg.T, cfg.threshold_tol, pool)
            timings["threshold_assembly"] = time.perf_counter() - t0
        info = {}
        t0 = time.perf_counter()
        beta = jacobi_triangular_solve(system, f, cfg, coupling=coupling, pool=pool, info=info)
        timings["jacobi"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        alpha, iters, res = block_cg_solve(system.diag, beta, cfg.level_tolerances(hier),
                                           [cfg.max_iter(n) for n in hier.sizes], pool, cfg.deterministic)
        timings["block_cg"] = time.perf_counter() - t0
        return MultiscaleSolution(alpha, iters, info["steps"], res, cfg, beta=beta,
                                  inner_iterations=info["inner_iterations"], timings=timings)
    finally:
        if owned:
            pool.close()


def sequential_multiscale(system: BlockSystem, f: BlockVector, cfg: SolverConfig | None = None,
                          pool: WorkerPool | None = None) -> MultiscaleSolution:
    """Level-by-level residual correction: ``A_l alpha_l = f_l - sum_{k<l} B_{l,k} alpha_k``."""
    cfg = cfg or SolverConfig()
    pool, owned = _make_pool(cfg, pool)
    try:
        hier = system.hierarchy
        f = f.check(hier.sizes)
        tols = cfg.level_tolerances(hier)
        alpha, iters, res = [], [], []
        t0 = time.perf_counter()
        for ell in range(1, hier.L + 1):
            rhs = f[ell].copy()
            for k in range(1, ell):
                rhs -= system.B(ell, k).matvec(alpha[k - 1], pool)
            A = system.A(ell)
            x, it, r = _cg_level(A, rhs, tols[ell - 1], cfg.max_iter(A.n_rows), pool, cfg.deterministic, ell)
            alpha.append(x)
            iters.append(it)
            res.append(r)
        timings = {"sequential": time.perf_counter() - t0}
        return MultiscaleSolution(BlockVector(alpha), iters, 0, res, cfg, timings=timings,
                                  algorithm="sequential")
    finally:
        if owned:
            pool.close()


def residual_norm(system: BlockSystem, alpha: BlockVector, f: BlockVector) -> float:
    """``||T_L alpha - f|| / ||f||`` using the assembled blocks."""
    T = system.to_sparse()
    r = T @ alpha.flat() - f.flat()
    fn = np.linalg.norm(f.flat())
    return float(np.linalg.norm(r) / fn) if fn else float(np.linalg.norm(r))


__all__ = [
    "BlockVector", "SolverConfig", "MultiscaleSolution", "CGConvergenceError",
    "block_cg_solve", "jacobi_triangular_solve", "solve_monolithic", "sequential_multiscale",
    "residual_norm", "read_coefficients_csv",
]
