"""Point hierarchies: grids, fill/separation distances, neighbour search, I/O.

Points of one level are stored as a read-only ``(N, d)`` float array. Grids are
produced in row-major order (first coordinate varies slowest), and every
matrix in the package indexes points by ``(level, within-level index)``.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .parallel import WorkerPool, as_pool, row_chunks

DEFAULT_FILL_RESOLUTION = 512
BINARY_MAGIC = b"MSKP"
BINARY_VERSION = 1
_REL_EPS = 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower_i, upper_i]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        if len(lower) != len(upper) or not lower:
            raise ValueError("lower and upper must have the same positive length")
        if any(u <= lo for lo, u in zip(lower, upper)):
            raise ValueError(f"degenerate box {lower} -> {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unit(cls, d: int = 2) -> "Box":
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points: np.ndarray, atol: float = 1e-12) -> bool:
        points = np.atleast_2d(points)
        return bool(
            np.all(points >= np.asarray(self.lower) - atol)
            and np.all(points <= np.asarray(self.upper) + atol)
        )


@dataclass(frozen=True)
class HierarchyParams:
    """Constants describing a quasi-uniform level hierarchy.

    ``gamma`` only enters the admissibility check ``nu <= gamma / mu``;
    when omitted it defaults to ``nu * mu`` so that check holds by construction.
    """

    d: int = 2
    mu: float = 0.5
    nu: float = 4.0
    c_h: float = 1.0
    c_q: float = 2.0
    tau: float = 3.0
    gamma: float | None = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")
        if self.nu <= 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not 0.0 < self.c_h <= 1.0:
            raise ValueError(f"c_h must lie in (0, 1], got {self.c_h}")
        if self.c_q < 1.0:
            raise ValueError(f"c_q must be >= 1, got {self.c_q}")
        if self.tau <= self.d / 2:
            raise ValueError(f"tau must exceed d/2 = {self.d / 2}, got {self.tau}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.nu * self.mu)


def _readonly(points) -> np.ndarray:
    arr = np.array(points, dtype=float, copy=True)
    if arr.ndim == 1:
        arr = arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LevelSet:
    level: int
    points: np.ndarray
    h: float
    q: float
    delta: float

    def __post_init__(self):
        if self.level < 1:
            raise ValueError(f"level must be >= 1, got {self.level}")
        object.__setattr__(self, "points", _readonly(self.points))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n


class SpatialIndex:
    """kd-tree over one point set with strict-radius range queries.

    ``range_query(x, r)`` returns exactly the indices ``i`` with
    ``||x - p_i||_2 < r``. scipy's tree reports closed balls, so the candidates
    are filtered against recomputed distances.
    """

    def __init__(self, points: np.ndarray, leafsize: int = 16):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.leafsize = leafsize
        self._tree = cKDTree(self.points, leafsize=leafsize)

    def __len__(self) -> int:
        return self.points.shape[0]

    def range_query(self, x, r: float) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        cand = np.asarray(self._tree.query_ball_point(x, r), dtype=np.intp)
        if cand.size == 0:
            return cand
        dist = np.linalg.norm(self.points[cand] - x, axis=1)
        return np.sort(cand[dist < r])

    def range_pairs(self, queries: np.ndarray, r: float):
        """All pairs ``(i, j)`` with ``||queries[i] - points[j]|| < r``.

        Returns ``(rows, cols, dist)``, sorted by row and then by column.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if queries.shape[0] == 0 or len(self) == 0:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, np.zeros(0)
        qtree = cKDTree(queries, leafsize=self.leafsize)
        pairs = qtree.sparse_distance_matrix(self._tree, r, output_type="ndarray")
        rows = pairs["i"].astype(np.intp)
        cols = pairs["j"].astype(np.intp)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        # recompute distances so the strict cut does not depend on the tree's arithmetic
        dist = np.linalg.norm(queries[rows] - self.points[cols], axis=1)
        keep = dist < r
        return rows[keep], cols[keep], dist[keep]

    def nearest(self, queries: np.ndarray, k: int = 1):
        return self._tree.query(np.atleast_2d(queries), k=k)


def generate_grid_level(level: int, domain: Box | None = None, nu: float = 4.0) -> LevelSet:
    """Tensor grid with ``2**level`` cells per axis, boundary included.

    Fill and separation distances use the closed forms of a regular grid.
    """
    if int(level) != level or level < 1:
        raise ValueError(f"level must be an integer >= 1, got {level}")
    domain = domain or Box.unit(2)
    m = 2 ** int(level)
    axes = [np.linspace(lo, up, m + 1) for lo, up in zip(domain.lower, domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    spacing = domain.widths / m
    q = 0.5 * float(spacing.min())
    h = 0.5 * float(np.sqrt(np.sum(spacing**2)))
    return LevelSet(int(level), points, h=h, q=q, delta=nu * h)


def separation_distance(points) -> float:
    """Half the smallest pairwise distance (nearest-neighbour query)."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < 2:
        raise ValueError("separation distance needs at least 2 points")
    dist, _ = cKDTree(points).query(points, k=2)
    return 0.5 * float(dist[:, 1].min())


def _tensor_axes(points: np.ndarray):
    """Per-axis coordinates if ``points`` is a full tensor-product grid."""
    n, d = points.shape
    axes = [np.unique(points[:, i]) for i in range(d)]
    if math.prod(len(a) for a in axes) != n:
        return None
    if len(np.unique(points, axis=0)) != n:
        return None
    return axes


def fill_distance(points, domain: Box, resolution: int = DEFAULT_FILL_RESOLUTION) -> float:
    """Fill distance of ``points`` in ``domain``.

    Exact for tensor-product grids: the squared distance splits into per-axis
    terms, so the supremum is attained axis by axis. Any other point set is
    measured on a probe grid of ``resolution`` points per axis, which gives a
    lower estimate of the supremum.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] == 0:
        raise ValueError("fill distance of an empty set is undefined")
    axes = _tensor_axes(points)
    if axes is not None:
        sq = 0.0
        for a, lo, up in zip(axes, domain.lower, domain.upper):
            worst = max(a[0] - lo, up - a[-1])
            if len(a) > 1:
                worst = max(worst, 0.5 * float(np.diff(a).max()))
            sq += worst**2
        return math.sqrt(sq)
    tree = cKDTree(points)
    probe_axes = [np.linspace(lo, up, resolution) for lo, up in zip(domain.lower, domain.upper)]
    best = 0.0
    # chunk over the first axis to bound memory for d >= 3
    for x0 in probe_axes[0]:
        rest = np.meshgrid(*probe_axes[1:], indexing="ij") if domain.d > 1 else []
        probes = np.column_stack([np.full(rest[0].size if rest else 1, x0)] + [g.ravel() for g in rest])
        dist, _ = tree.query(probes, k=1)
        best = max(best, float(dist.max()))
    return best


def make_level(level: int, points, domain: Box, nu: float, resolution: int = DEFAULT_FILL_RESOLUTION) -> LevelSet:
    """Wrap a user-supplied point set as a level, measuring ``h`` and ``q``."""
    points = np.asarray(points, dtype=float)
    if not domain.contains(points):
        raise ValueError(f"level {level}: points outside the domain {domain}")
    h = fill_distance(points, domain, resolution)
    q = separation_distance(points)
    return LevelSet(level, points, h=h, q=q, delta=nu * h)


@dataclass(frozen=True)
class LevelHierarchy:
    params: HierarchyParams
    domain: Box
    levels: tuple
    _indexes: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("hierarchy needs at least one level")
        if self.domain.d != self.params.d:
            raise ValueError(f"domain dimension {self.domain.d} != params.d {self.params.d}")
        for i, lv in enumerate(self.levels, start=1):
            if lv.level != i:
                raise ValueError(f"level {i} carries label {lv.level}")
            if lv.d != self.params.d:
                raise ValueError(f"level {i} has dimension {lv.d}, expected {self.params.d}")
            if not self.domain.contains(lv.points):
                raise ValueError(f"level {i} has points outside the domain")
            if not math.isclose(lv.delta, self.params.nu * lv.h, rel_tol=1e-14):
                raise ValueError(f"level {i}: delta != nu * h")
        sizes = [lv.n for lv in self.levels]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"point counts must strictly increase, got {sizes}")

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> list[int]:
        return [lv.n for lv in self.levels]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def n_total(self) -> int:
        return int(sum(self.sizes))

    def level(self, ell: int) -> LevelSet:
        if not 1 <= ell <= self.L:
            raise IndexError(f"level {ell} out of range 1..{self.L}")
        return self.levels[ell - 1]

    def index(self, ell: int, leafsize: int = 16) -> SpatialIndex:
        """Cached spatial index of level ``ell``."""
        key = (ell, leafsize)
        if key not in self._indexes:
            self._indexes[key] = SpatialIndex(self.level(ell).points, leafsize=leafsize)
        return self._indexes[key]

    def truncate(self, L: int) -> "LevelHierarchy":
        """The sub-hierarchy of the first ``L`` levels."""
        if not 1 <= L <= self.L:
            raise ValueError(f"cannot truncate {self.L} levels to {L}")
        return LevelHierarchy(self.params, self.domain, self.levels[:L])


def build_grid_hierarchy(L: int, params: HierarchyParams | None = None, domain: Box | None = None) -> LevelHierarchy:
    params = params or HierarchyParams()
    domain = domain or Box.unit(params.d)
    levels = [generate_grid_level(ell, domain, nu=params.nu) for ell in range(1, L + 1)]
    return LevelHierarchy(params, domain, levels)


def hierarchy_from_points(point_sets, params: HierarchyParams, domain: Box,
                          resolution: int = DEFAULT_FILL_RESOLUTION) -> LevelHierarchy:
    levels = [make_level(i, pts, domain, params.nu, resolution) for i, pts in enumerate(point_sets, start=1)]
    return LevelHierarchy(params, domain, levels)


@dataclass
class ValidationReport:
    """Observed hierarchy constants and any violated assumptions."""

    h_ratios: list
    hq_ratios: list
    c_h_observed: float | None
    c_q_observed: float
    c_sharp_observed: float
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {
            "h_ratios": self.h_ratios,
            "hq_ratios": self.hq_ratios,
            "c_h_observed": self.c_h_observed,
            "c_q_observed": self.c_q_observed,
            "c_sharp_observed": self.c_sharp_observed,
            "violations": self.violations,
            "passed": self.passed,
        }


def validate_levels(params: HierarchyParams, records) -> ValidationReport:
    """Check the quasi-uniformity assumptions from ``(level, N, h, q)`` records; never raises."""
    p = params
    lv = [tuple(r) for r in records]
    violations = []
    h_ratios = [b[2] / a[2] for a, b in zip(lv, lv[1:])]
    for (ell, _, ha, _), (_, _, hb, _) in zip(lv, lv[1:]):
        lo, hi = p.c_h * p.mu * ha, p.mu * ha
        if hb < lo * (1 - _REL_EPS) or hb > hi * (1 + _REL_EPS):
            violations.append(
                f"levels {ell}->{ell + 1}: h ratio {hb / ha:.6g} outside [c_h*mu, mu] = [{p.c_h * p.mu:.6g}, {p.mu:.6g}]"
            )
    hq = [h / q for _, _, h, q in lv]
    for (ell, _, h, q), r in zip(lv, hq):
        if q > h * (1 + _REL_EPS):
            violations.append(f"level {ell}: q = {q:.6g} exceeds h = {h:.6g}")
        if r > p.c_q * (1 + _REL_EPS):
            violations.append(f"level {ell}: h/q = {r:.6g} exceeds c_q = {p.c_q:.6g}")
    if p.mu ** (-p.d) <= 2.0:
        violations.append(f"mu^(-d) > 2 violated: mu^(-d) = {p.mu ** (-p.d):.6g}")
    nu_lo, nu_hi = 1.0 / lv[0][2], p.gamma / p.mu
    if not nu_lo * (1 - _REL_EPS) <= p.nu <= nu_hi * (1 + _REL_EPS):
        violations.append(f"nu = {p.nu:.6g} outside [1/h_1, gamma/mu] = [{nu_lo:.6g}, {nu_hi:.6g}]")
    c_sharp = min(n * p.mu ** (p.d * ell) for ell, n, _, _ in lv)
    c_h_obs = min(h_ratios) / p.mu if h_ratios else None
    return ValidationReport(h_ratios, hq, c_h_obs, max(hq), c_sharp, violations)


def validate_hierarchy(hierarchy: LevelHierarchy) -> ValidationReport:
    """Check the quasi-uniformity assumptions of a hierarchy; never raises."""
    return validate_levels(hierarchy.params, [(x.level, x.n, x.h, x.q) for x in hierarchy.levels])


# --------------------------------------------------------------------------
# point-set files
# --------------------------------------------------------------------------

def write_points_csv(path, points) -> None:
    """One point per row under an ``x0,x1,...`` header; values in shortest round-trip form."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(f"x{i}" for i in range(points.shape[1])) + "\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if rows and rows[0][0].startswith("x"):
        rows = rows[1:]
    rows = [[float(v) for v in row] for row in rows]
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=float)


def write_points_binary(path, points) -> None:
    """``MSKP`` | version u32 | d u32 | N u64 | N*d little-endian float64."""
    points = np.atleast_2d(np.asarray(points, dtype="<f8"))
    n, d = points.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIQ", BINARY_VERSION, d, n))
        fh.write(np.ascontiguousarray(points).tobytes())


def read_points_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise ValueError(f"{path}: not an MSKP point file")
    version, d, n = struct.unpack_from("<IIQ", data, 4)
    if version != BINARY_VERSION:
        raise ValueError(f"{path}: unsupported MSKP version {version}")
    body = data[20:]
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} doubles, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).copy()


def pairs_in_radius(row_points: np.ndarray, col_index: SpatialIndex, radius: float,
                    pool: WorkerPool | None = None, chunk: int = 8192):
    """Row-chunked :meth:`SpatialIndex.range_pairs`, chunks spread over the inner pool."""
    pool = as_pool(pool)
    n = row_points.shape[0]
    parts = [(a, b) for a, b in row_chunks(n, max(1, -(-n // chunk)))]

    def work(span):
        a, b = span
        r, c, dist = col_index.range_pairs(row_points[a:b], radius)
        return r + a, c, dist

    # row chunks go to the inner executor: callers may already run inside an outer task
    results = pool.map_rows(work, parts)
    if not results:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, np.zeros(0)
    rows = np.concatenate([r[0] for r in results])
    cols = np.concatenate([r[1] for r in results])
    dist = np.concatenate([r[2] for r in results])
    return rows, cols, dist
