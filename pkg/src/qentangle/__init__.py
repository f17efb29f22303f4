"""Position and momentum correlations of free Gaussian particles in vacuum,
under Ohmic friction and under thermal noise."""

from .core import (
    CovMatrix,
    DomainError,
    GaussianState,
    NotPositiveDefinite,
    NotSymmetric,
    PairStats,
    PhysConsts,
    extract_pair_stats,
    pair_covariance,
    validate_spd,
)
from .dynamics import (
    SolverConfig,
    Trajectory,
    integrate_eq7,
    integrate_ermakov,
    integrate_thermo_moments,
    monitor_invariants,
)

__all__ = [
    "CovMatrix",
    "DomainError",
    "GaussianState",
    "NotPositiveDefinite",
    "NotSymmetric",
    "PairStats",
    "PhysConsts",
    "SolverConfig",
    "Trajectory",
    "extract_pair_stats",
    "integrate_eq7",
    "integrate_ermakov",
    "integrate_thermo_moments",
    "monitor_invariants",
    "pair_covariance",
    "validate_spd",
]
