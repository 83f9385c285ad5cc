"""Kernel-based multiscale approximation solved as one block-triangular system."""
from .geometry import (Box, HierarchyParams, LevelHierarchy, LevelSet, SpatialIndex,
                       build_grid_hierarchy, fill_distance, generate_grid_level,
                       separation_distance, validate_hierarchy)
from .kernel import ScaledKernel, WendlandKernel, eval_phi31, eval_scaled, get_kernel
from .assembly import (BlockSystem, SparseKernelMatrix, ThresholdedCoupling, assemble_coupling,
                       assemble_diag, assemble_system, assemble_thresholded)
from .solver import (BlockVector, MultiscaleSolution, SolverConfig, block_cg_solve,
                     jacobi_triangular_solve, sequential_multiscale, solve_monolithic)

__version__ = "0.1.0"
