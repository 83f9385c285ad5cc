"""Sparse kernel blocks of the block-lower-triangular multiscale system.

Block ``(k, l)`` with ``k >= l`` holds ``Phi_{delta_l}(x^(k)_i - x^(l)_j)``; the
diagonal blocks ``A_l = B_{l,l}`` are the level Gram matrices. The coupling
``X_{k,l} = B_{k,l} A_l^{-1}`` collects values of the level-``l`` Lagrange
functions at the level-``k`` points, and ``M = id - T'`` is the strictly lower
block matrix with blocks ``-X_{k,l}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

from .geometry import LevelHierarchy, pairs_in_radius
from .kernel import DEFAULT_KERNEL, WendlandKernel, get_kernel
from .krylov import CGConvergenceError, cg_multi, default_max_iter
from .parallel import WorkerPool, as_pool, row_chunks

DEFAULT_THRESHOLD_TOL = 1e-10
NNZ_ATOL = 1e-8
MAX_DENSE_ENTRIES = 60_000_000
ROW_BATCH = 256


@dataclass(frozen=True)
class SparseKernelMatrix:
    """Immutable CSR matrix with sorted, duplicate-free column indices."""

    csr: sp.csr_matrix
    symmetric: bool = False
    _chunks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.csr, dtype=float)
        m.sum_duplicates()
        m.sort_indices()
        for arr in (m.data, m.indices, m.indptr):
            arr.setflags(write=False)
        object.__setattr__(self, "csr", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    @property
    def row_offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def count_nonzero(self, atol: float = 0.0) -> int:
        """Entries with ``|value| >= atol`` (all stored entries when ``atol == 0``)."""
        if atol <= 0:
            return self.nnz
        return int(np.count_nonzero(np.abs(self.csr.data) >= atol))

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def _row_blocks(self, parts: int):
        if parts not in self._chunks:
            self._chunks[parts] = [(a, b, self.csr[a:b]) for a, b in row_chunks(self.n_rows, parts)]
        return self._chunks[parts]

    def matvec(self, x: np.ndarray, pool: WorkerPool | None = None) -> np.ndarray:
        """``self @ x``, split over row chunks when the pool has several workers.

        Every row is summed in the same order regardless of the split, so the
        result is bitwise independent of the worker count.
        """
        pool = as_pool(pool)
        if pool.workers == 1 or self.n_rows < 2048:
            return self.csr @ x
        pieces = pool.map_rows(lambda blk: blk[2] @ x, self._row_blocks(pool.workers))
        return np.concatenate(pieces, axis=0)

    def rmatvec(self, x: np.ndarray, pool: WorkerPool | None = None) -> np.ndarray:
        if self.symmetric:
            return self.matvec(x, pool)
        return self.csr.T @ x

    def __matmul__(self, x):
        return self.csr @ x

    def transpose(self) -> "SparseKernelMatrix":
        return SparseKernelMatrix(self.csr.T.tocsr(), self.symmetric)

    def is_symmetric(self, rtol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        diff = abs(self.csr - self.csr.T)
        return diff.nnz == 0 or diff.max() <= rtol * abs(self.csr).max()

    def write_matrix_market(self, path) -> None:
        """Coordinate Matrix Market file, ``symmetric`` when flagged so."""
        scipy.io.mmwrite(str(path), self.csr.tocoo(),
                         symmetry="symmetric" if self.symmetric else "general",
                         precision=17)


def _kernel_block(row_points, hierarchy: LevelHierarchy, col_level: int,
                  kernel: WendlandKernel, pool) -> sp.csr_matrix:
    col = hierarchy.level(col_level)
    scaled = kernel.scaled(col.delta, hierarchy.params.d)
    rows, cols, dist = pairs_in_radius(row_points, hierarchy.index(col_level), col.delta, pool)
    vals = scaled.radial(dist)
    return sp.csr_matrix((vals, (rows, cols)), shape=(row_points.shape[0], col.n))


def assemble_diag(hierarchy: LevelHierarchy, level: int, kernel: WendlandKernel | None = None,
                  pool: WorkerPool | None = None) -> SparseKernelMatrix:
    """Gram matrix ``A_level`` from fixed-radius neighbour queries."""
    kernel = kernel or get_kernel(DEFAULT_KERNEL)
    pts = hierarchy.level(level).points
    return SparseKernelMatrix(_kernel_block(pts, hierarchy, level, kernel, pool), symmetric=True)


def assemble_coupling(hierarchy: LevelHierarchy, k: int, ell: int,
                      kernel: WendlandKernel | None = None,
                      pool: WorkerPool | None = None) -> SparseKernelMatrix:
    """``B_{k,ell}``: level-``k`` rows, level-``ell`` columns, scale ``delta_ell``."""
    if k <= ell:
        raise ValueError(f"coupling block needs row level > column level, got k={k}, ell={ell}")
    kernel = kernel or get_kernel(DEFAULT_KERNEL)
    pts = hierarchy.level(k).points
    return SparseKernelMatrix(_kernel_block(pts, hierarchy, ell, kernel, pool), symmetric=False)


@dataclass(frozen=True)
class BlockSystem:
    """``T_L``: diagonal Gram blocks plus strictly lower coupling blocks."""

    hierarchy: LevelHierarchy
    kernel: WendlandKernel
    diag: tuple
    lower: dict

    @property
    def L(self) -> int:
        return self.hierarchy.L

    def A(self, ell: int) -> SparseKernelMatrix:
        return self.diag[ell - 1]

    def B(self, k: int, ell: int) -> SparseKernelMatrix:
        if k == ell:
            return self.A(ell)
        return self.lower[(k, ell)]

    def to_sparse(self) -> sp.csr_matrix:
        """The full ``T_L`` as one sparse matrix (level-major ordering)."""
        L = self.L
        grid = [[self.B(k, l).csr if l <= k else None for l in range(1, L + 1)] for k in range(1, L + 1)]
        return sp.bmat(grid, format="csr")

    def nnz(self) -> int:
        return sum(a.nnz for a in self.diag) + sum(b.nnz for b in self.lower.values())


def assemble_system(hierarchy: LevelHierarchy, kernel: WendlandKernel | str | None = None,
                    pool: WorkerPool | None = None) -> BlockSystem:
    if kernel is None or isinstance(kernel, str):
        kernel = get_kernel(kernel or DEFAULT_KERNEL)
    pool = as_pool(pool)
    L = hierarchy.L
    diag = tuple(pool.map(lambda l: assemble_diag(hierarchy, l, kernel, pool), range(1, L + 1)))
    pairs = [(k, l) for k in range(2, L + 1) for l in range(1, k)]
    blocks = pool.map(lambda kl: assemble_coupling(hierarchy, kl[0], kl[1], kernel, pool), pairs)
    return BlockSystem(hierarchy, kernel, diag, dict(zip(pairs, blocks)))


def _block_distances(hierarchy: LevelHierarchy, k: int, ell: int, csr: sp.csr_matrix) -> np.ndarray:
    rows = np.repeat(np.arange(csr.shape[0]), np.diff(csr.indptr))
    return np.linalg.norm(hierarchy.level(k).points[rows] - hierarchy.level(ell).points[csr.indices], axis=1)


def _truncated_label(T: float) -> str:
    return "full" if math.isinf(T) else f"{T:g}"


@dataclass(frozen=True)
class ThresholdedCoupling:
    """Truncated Lagrange coupling ``X~(T)``; ``M~(T)`` has blocks ``-X~_{k,l}``.

    Block ``(k, l)`` keeps the entries whose point pair is closer than
    ``T * q_l``. ``T = math.inf`` keeps everything and represents ``M`` itself.
    """

    hierarchy: LevelHierarchy
    truncation: float
    blocks: dict
    solve_tolerance: float = DEFAULT_THRESHOLD_TOL

    @property
    def L(self) -> int:
        return self.hierarchy.L

    @property
    def is_full(self) -> bool:
        return math.isinf(self.truncation)

    @property
    def label(self) -> str:
        return _truncated_label(self.truncation)

    def X(self, k: int, ell: int) -> SparseKernelMatrix:
        return self.blocks[(k, ell)]

    def nnz(self, atol: float = NNZ_ATOL) -> int:
        """Stored entries of magnitude at least ``atol`` over all blocks."""
        return sum(b.count_nonzero(atol) for b in self.blocks.values())

    def apply_M(self, v, pool: WorkerPool | None = None) -> list:
        """``M v`` for a per-level list of vectors: block ``k`` is ``-sum_{l<k} X_{k,l} v_l``."""
        pool = as_pool(pool)
        L = self.L

        def row(k):
            out = np.zeros(self.hierarchy.level(k).n)
            for ell in range(1, k):
                out -= self.blocks[(k, ell)].matvec(v[ell - 1], pool)
            return out

        return pool.map(row, range(1, L + 1))

    def apply_MT(self, v, pool: WorkerPool | None = None) -> list:
        """``M^T v``: block ``l`` is ``-sum_{k>l} X_{k,l}^T v_k``."""
        pool = as_pool(pool)
        L = self.L

        def col(ell):
            out = np.zeros(self.hierarchy.level(ell).n)
            for k in range(ell + 1, L + 1):
                out -= self.blocks[(k, ell)].csr.T @ v[k - 1]
            return out

        return pool.map(col, range(1, L + 1))

    def to_sparse(self) -> sp.csr_matrix:
        """``M~`` as one sparse matrix in level-major ordering."""
        L = self.L
        sizes = self.hierarchy.sizes
        grid = [[None] * L for _ in range(L)]
        for i in range(L):
            grid[i][i] = sp.csr_matrix((sizes[i], sizes[i]))
        for (k, ell), blk in self.blocks.items():
            grid[k - 1][ell - 1] = -blk.csr
        return sp.bmat(grid, format="csr")

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def restrict(self, T: float) -> "ThresholdedCoupling":
        """Drop entries at distance ``>= T * q_l`` without re-solving."""
        if not T > 0:
            raise ValueError(f"truncation multiplier must be positive, got {T}")
        if T > self.truncation:
            raise ValueError(f"cannot widen truncation from {self.label} to {_truncated_label(T)}")
        if math.isinf(T):
            return self
        out = {}
        for (k, ell), blk in self.blocks.items():
            dist = _block_distances(self.hierarchy, k, ell, blk.csr)
            keep = dist < T * self.hierarchy.level(ell).q
            coo = blk.csr.tocoo()
            out[(k, ell)] = SparseKernelMatrix(
                sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=blk.shape))
        return ThresholdedCoupling(self.hierarchy, float(T), out, self.solve_tolerance)

    def difference(self, other: "ThresholdedCoupling") -> "ThresholdedCoupling":
        """Coupling whose ``M`` equals ``M_self - M_other``."""
        if other.hierarchy is not self.hierarchy and other.hierarchy.sizes != self.hierarchy.sizes:
            raise ValueError("couplings belong to different hierarchies")
        out = {kl: SparseKernelMatrix(self.blocks[kl].csr - other.blocks[kl].csr) for kl in self.blocks}
        return ThresholdedCoupling(self.hierarchy, math.nan, out, self.solve_tolerance)


def _estimate_entries(hierarchy: LevelHierarchy, T: float) -> float:
    sizes = hierarchy.sizes
    d = hierarchy.params.d
    total = 0.0
    for k in range(2, hierarchy.L + 1):
        for ell in range(1, k):
            if math.isinf(T):
                total += sizes[k - 1] * sizes[ell - 1]
            else:
                q = hierarchy.level(ell).q
                vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * (T * q) ** d
                per_row = min(sizes[ell - 1], vol / hierarchy.domain.volume * sizes[ell - 1] + 1)
                total += sizes[k - 1] * per_row
    return total


def assemble_thresholded(system: BlockSystem, T: float = math.inf, tol: float = DEFAULT_THRESHOLD_TOL,
                         pool: WorkerPool | None = None, max_iter: int | None = None,
                         batch: int = ROW_BATCH,
                         max_entries: float = MAX_DENSE_ENTRIES) -> ThresholdedCoupling:
    """Build ``X~(T)`` by one CG solve per row of every coupling block.

    Row ``i`` of ``X_{k,l}`` solves ``A_l y = b_i`` with ``b_i`` the kernel
    vector of ``x^(k)_i`` against the level-``l`` centres. Rows are grouped in
    batches of fixed size, so the result does not depend on the worker count.
    """
    if not T > 0:
        raise ValueError(f"truncation multiplier must be positive, got {T}")
    hier = system.hierarchy
    est = _estimate_entries(hier, T)
    if est > max_entries:
        raise MemoryError(
            f"T = {_truncated_label(T)} on {hier.L} levels would store about {est:.3g} entries "
            f"(limit {max_entries:.3g}); use a finite T or fewer levels")
    pool = as_pool(pool)
    tasks = []
    for k in range(2, hier.L + 1):
        for ell in range(1, k):
            for a, b in _fixed_batches(hier.level(k).n, batch):
                tasks.append((k, ell, a, b))

    def work(task):
        k, ell, a, b = task
        A = system.A(ell)
        rhs = system.B(k, ell).csr[a:b].T.toarray()
        n = A.n_rows
        try:
            Y, _, _ = cg_multi(A.csr, rhs, tol, max_iter or default_max_iter(n))
        except CGConvergenceError as exc:
            row = a + (exc.row or 0)
            raise CGConvergenceError(
                f"row solve failed in block (k={k}, l={ell}) at row i={row}: {exc}",
                block=(k, ell), row=row, residual=exc.residual, iterations=exc.iterations) from exc
        Y = Y.T  # rows of X
        if math.isinf(T):
            r, c = np.nonzero(np.ones_like(Y, dtype=bool))
        else:
            r, c, _ = hier.index(ell).range_pairs(hier.level(k).points[a:b], T * hier.level(ell).q)
        return k, ell, r + a, c, Y[r, c]

    results = pool.map(work, tasks)
    parts: dict = {}
    for k, ell, r, c, v in results:
        parts.setdefault((k, ell), []).append((r, c, v))
    blocks = {}
    for (k, ell), chunks in parts.items():
        r = np.concatenate([x[0] for x in chunks])
        c = np.concatenate([x[1] for x in chunks])
        v = np.concatenate([x[2] for x in chunks])
        shape = (hier.level(k).n, hier.level(ell).n)
        blocks[(k, ell)] = SparseKernelMatrix(sp.csr_matrix((v, (r, c)), shape=shape))
    return ThresholdedCoupling(hier, float(T), blocks, tol)


def _fixed_batches(n: int, batch: int):
    return [(a, min(a + batch, n)) for a in range(0, n, batch)]


def dense_coupling(system: BlockSystem) -> dict:
    """Reference ``X_{k,l} = B_{k,l} A_l^{-1}`` by dense factorisation (small systems)."""
    out = {}
    for (k, ell), B in system.lower.items():
        A = system.A(ell).toarray()
        out[(k, ell)] = np.linalg.solve(A, B.toarray().T).T
    return out
