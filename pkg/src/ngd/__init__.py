"""Simulator and analysis tools for network gradient descent."""

from . import data_gen, diagnostics, engine, errors, experiment, losses, topology
from .data_gen import Dataset, Partition, generate, partition
from .engine import NgdState, RunConfig, Trajectory, contraction_spectral_radius, ngd_step, run, stable_solution_ols
from .losses import ShardedProblem, global_estimator, max_stable_lr
from .topology import (
    AdjacencyMatrix,
    WeightMatrix,
    balance_stats,
    build_central_client,
    build_circle,
    build_fixed_degree,
    to_weight_matrix,
)

__version__ = "0.1.0"
