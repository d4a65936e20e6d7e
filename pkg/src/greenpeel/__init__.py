"""Data-driven recovery of elliptic Green's operators by hierarchical peeling."""

from .grid_pde import CoefficientField, Grid, assemble, build_grid, dense_kernel, hs_norm, op_norm, solve
from .hierarchy import block_lists, build_tree, coloring
from .peeling import (
    HierarchicalApprox, KernelOracle, PeelConfig, SolveLedger, TrainingSet, evaluate_exact, evaluate_sampled,
    learn, learn_from_dataset, tolerance_schedule,
)
from .theory import failure_bound, n_theory

__version__ = "0.1.0"
