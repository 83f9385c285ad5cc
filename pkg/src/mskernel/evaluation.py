"""Evaluation of multiscale approximants, test targets and error measures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import BlockSystem, assemble_thresholded
from .geometry import Box, LevelHierarchy
from .kernel import DEFAULT_KERNEL, WendlandKernel, get_kernel
from .parallel import WorkerPool, as_pool
from .solver import BlockVector, SolverConfig, solve_monolithic

EVAL_CHUNK = 65536
DEFAULT_QUADRATURE = 1024


@dataclass(frozen=True)
class TargetFunction:
    """Named scalar function on ``(n, d)`` point arrays."""

    name: str
    fn: object

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self.fn(points), dtype=float)


def franke(x, y):
    """Franke's four-Gaussian test surface, with a linear exponent in the second term."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (0.75 * np.exp(-((9 * x - 2) ** 2 + (9 * y - 2) ** 2) / 4)
            + 0.75 * np.exp(-((9 * x + 1) ** 2) / 49 - (9 * y + 1) / 10)
            + 0.5 * np.exp(-((9 * x - 7) ** 2 + (9 * y - 3) ** 2) / 4)
            - 0.2 * np.exp(-((9 * x - 4) ** 2) - (9 * y - 7) ** 2))


def franke_classic(x, y):
    """The usual Franke function, whose second exponent squares ``(9y+1)/10``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (0.75 * np.exp(-((9 * x - 2) ** 2 + (9 * y - 2) ** 2) / 4)
            + 0.75 * np.exp(-((9 * x + 1) ** 2) / 49 - ((9 * y + 1) / 10) ** 2)
            + 0.5 * np.exp(-((9 * x - 7) ** 2 + (9 * y - 3) ** 2) / 4)
            - 0.2 * np.exp(-((9 * x - 4) ** 2) - (9 * y - 7) ** 2))


def _planar(fn):
    def wrapped(p):
        if p.shape[1] != 2:
            raise ValueError(f"this target is defined on R^2, got dimension {p.shape[1]}")
        return fn(p[:, 0], p[:, 1])
    return wrapped


TARGETS = {
    "franke": TargetFunction("franke", _planar(franke)),
    "franke-classic": TargetFunction("franke-classic", _planar(franke_classic)),
    "zero": TargetFunction("zero", lambda p: np.zeros(p.shape[0])),
}


def get_target(name: str) -> TargetFunction:
    try:
        return TARGETS[name]
    except KeyError:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(TARGETS)}") from None


@dataclass(frozen=True)
class Approximant:
    """``sum_l sum_n alpha^(l)_n Phi_{delta_l}(. - x^(l)_n)``."""

    hierarchy: LevelHierarchy
    alpha: BlockVector
    kernel: WendlandKernel = field(default_factory=lambda: get_kernel(DEFAULT_KERNEL))

    def __post_init__(self):
        self.alpha.check(self.hierarchy.sizes)

    def evaluate(self, x) -> float:
        return float(self.evaluate_many(np.atleast_2d(np.asarray(x, dtype=float)))[0])

    def evaluate_many(self, points, pool: WorkerPool | None = None, chunk: int = EVAL_CHUNK) -> np.ndarray:
        """Values at an ``(n, d)`` array; only centres within ``delta_l`` contribute."""
        pool = as_pool(pool)
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        spans = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]

        def work(span):
            a, b = span
            pts = points[a:b]
            out = np.zeros(b - a)
            for ell in range(1, self.hierarchy.L + 1):
                coef = self.alpha[ell]
                if not np.any(coef):
                    continue
                lv = self.hierarchy.level(ell)
                rows, cols, dist = self.hierarchy.index(ell).range_pairs(pts, lv.delta)
                vals = self.kernel.scaled(lv.delta, self.hierarchy.params.d).radial(dist) * coef[cols]
                out += np.bincount(rows, weights=vals, minlength=b - a)
            return out

        parts = pool.map(work, spans)
        return np.concatenate(parts) if parts else np.zeros(0)

    def __call__(self, points) -> np.ndarray:
        return self.evaluate_many(points)

    def __sub__(self, other: "Approximant") -> "Approximant":
        return Approximant(self.hierarchy, self.alpha - other.alpha, self.kernel)


def evaluate(approx: Approximant, x) -> float:
    return approx.evaluate(x)


def midpoint_grid(domain: Box, resolution: int) -> tuple[np.ndarray, float]:
    """Cell centres of a uniform ``resolution^d`` partition and the cell volume."""
    axes = [lo + (np.arange(resolution) + 0.5) * (up - lo) / resolution
            for lo, up in zip(domain.lower, domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    return pts, domain.volume / resolution**domain.d


@dataclass(frozen=True)
class ErrorEstimate:
    l2: float
    linf: float
    resolution: int


def l2_error(approx: Approximant, target, resolution: int = DEFAULT_QUADRATURE,
             pool: WorkerPool | None = None) -> ErrorEstimate:
    """Midpoint-rule ``L2`` norm of ``target - approx`` and the maximum over the same nodes.

    ``target`` may be ``None`` (norm of the approximant itself), a
    :class:`TargetFunction`, another :class:`Approximant`, or a callable on
    ``(n, d)`` arrays.
    """
    if resolution < 64:
        raise ValueError(f"quadrature resolution must be >= 64 per axis, got {resolution}")
    pts, cell = midpoint_grid(approx.hierarchy.domain, resolution)
    vals = approx.evaluate_many(pts, pool)
    if target is None:
        err = vals
    elif isinstance(target, Approximant):
        err = target.evaluate_many(pts, pool) - vals
    else:
        err = np.asarray(target(pts), dtype=float) - vals
    return ErrorEstimate(math.sqrt(cell * float(np.sum(err * err))), float(np.max(np.abs(err))), resolution)


@dataclass
class TruncationErrorReport:
    L: int
    T_values: list
    differences: list
    full_difference: float
    slope: float
    nonincreasing: bool
    rows: list = field(default_factory=list)


def truncated_vs_exact_error(system: BlockSystem, target, T_list, cfg: SolverConfig | None = None,
                             resolution: int = 512, pool: WorkerPool | None = None,
                             noise: float = 0.05) -> TruncationErrorReport:
    """``||f_L - f~_L||_{L2}`` between the exact solve and thresholded solves per ``T``.

    The full coupling is built once with ``cfg.threshold_tol`` and masked per
    ``T``. ``nonincreasing`` allows a relative rise of ``noise`` between
    consecutive values.
    """
    cfg = cfg or SolverConfig(cg_tol=1e-12, threshold_tol=1e-12)
    pool = as_pool(pool)
    hier = system.hierarchy
    target = get_target(target) if isinstance(target, str) else target
    f = BlockVector.sample(hier, target)
    exact_cfg = replace(cfg, jacobi_mode="matrix_free", T=None)
    exact = solve_monolithic(system, f, exact_cfg, pool=pool)
    f_exact = Approximant(hier, exact.alpha, system.kernel)
    full = assemble_thresholded(system, math.inf, cfg.threshold_tol, pool)
    thr_cfg = replace(cfg, jacobi_mode="thresholded", T=math.inf)

    def diff_for(coupling):
        sol = solve_monolithic(system, f, thr_cfg, coupling=coupling, pool=pool)
        return l2_error(f_exact - Approximant(hier, sol.alpha, system.kernel), None, resolution, pool).l2

    T_list = [float(T) for T in T_list]
    diffs = [diff_for(full.restrict(T)) for T in T_list]
    full_diff = diff_for(full)
    slope = math.nan
    pos = [(T, d) for T, d in zip(T_list, diffs) if d > 0]
    if len(pos) >= 2:
        slope = float(np.polyfit([p[0] for p in pos], np.log([p[1] for p in pos]), 1)[0])
    mono = all(b <= a * (1 + noise) for a, b in zip(diffs, diffs[1:]))
    rows = [(hier.L, hier.n_total, d, T) for T, d in zip(T_list, diffs)]
    rows.append((hier.L, hier.n_total, full_diff, math.inf))
    return TruncationErrorReport(hier.L, T_list, diffs, full_diff, slope, mono, rows)
