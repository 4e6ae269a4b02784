"""Schrodinger bridges, optimal transport with a prior, and their Gaussian closed forms."""

from .estimators import GaussianBridge, GridSchrodingerBridge
from .exceptions import BridgeError, SolverError, ValidationError
from .gauss_markov import (
    GaussianMarginal,
    GaussMarkovBridge,
    LinearPrior,
    TimeGrid,
    bridge_solve,
)
from .schrodinger_grid import GridDensity, SpatialGrid, fortet_solve
from .sde_sim import PathEnsemble, simulate

__version__ = "0.1.0"

__all__ = [
    "BridgeError",
    "GaussMarkovBridge",
    "GaussianBridge",
    "GaussianMarginal",
    "GridDensity",
    "GridSchrodingerBridge",
    "LinearPrior",
    "PathEnsemble",
    "SolverError",
    "SpatialGrid",
    "TimeGrid",
    "ValidationError",
    "bridge_solve",
    "fortet_solve",
    "simulate",
]
