"""Domain types shared by every module: constants, covariance matrices, states.

All types are immutable after construction. Matrices are stored as read-only
``numpy`` arrays so a value handed to another thread cannot be mutated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

#: relative positive-definiteness threshold, scaled by the largest diagonal entry
SPD_RTOL = 1e-10
#: relative asymmetry accepted silently before symmetrization
SYM_RTOL = 1e-12
#: condition number above which results carry a warning
COND_WARN = 1e12


class DomainError(ValueError):
    """A parameter lies outside the domain where a formula is defined."""


class NotPositiveDefinite(ValueError):
    """Smallest eigenvalue of a covariance matrix is at or below tolerance."""


class NotSymmetric(UserWarning):
    """Input matrix was asymmetric beyond rounding before symmetrization."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PhysConsts:
    """Physical constants entering every evolution law.

    Parameters
    ----------
    hbar : float
        Reduced Planck constant, > 0.
    mass : float
        Particle mass, > 0.
    gamma : float
        Specific (per unit mass) Ohmic friction coefficient, >= 0.
    kbt : float
        Thermal energy k_B T, >= 0.
    """

    hbar: float = 1.0
    mass: float = 1.0
    gamma: float = 0.0
    kbt: float = 0.0

    def __post_init__(self):
        for name in ("hbar", "mass", "gamma", "kbt"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
        if self.hbar <= 0:
            raise DomainError(f"hbar must be > 0, got {self.hbar}")
        if self.mass <= 0:
            raise DomainError(f"mass must be > 0, got {self.mass}")
        if self.gamma < 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        if self.kbt < 0:
            raise DomainError(f"kbt must be >= 0, got {self.kbt}")

    @classmethod
    def natural(cls, gamma: float = 0.0, kbt: float = 0.0) -> "PhysConsts":
        """Natural units, hbar = mass = 1."""
        return cls(hbar=1.0, mass=1.0, gamma=gamma, kbt=kbt)

    @property
    def diffusion(self) -> float:
        """Einstein diffusion constant k_B T / (m gamma)."""
        if self.gamma <= 0:
            raise DomainError("diffusion constant needs gamma > 0")
        return self.kbt / (self.mass * self.gamma)

    def replace(self, **changes) -> "PhysConsts":
        values = dict(hbar=self.hbar, mass=self.mass, gamma=self.gamma, kbt=self.kbt)
        values.update(changes)
        return PhysConsts(**values)


def spd_tolerance(m: np.ndarray, rtol: float = SPD_RTOL) -> float:
    return rtol * float(np.max(np.abs(np.diag(m))))


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric positive-definite position covariance matrix.

    The input is symmetrized on construction and rejected with
    :class:`NotPositiveDefinite` when its smallest eigenvalue does not exceed
    ``tol`` (default: ``SPD_RTOL`` times the largest diagonal entry).
    """

    entries: np.ndarray
    tol: float | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ValueError(f"covariance must be a non-empty square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("covariance has non-finite entries")
        m = 0.5 * (m + m.T)
        tol = spd_tolerance(m) if self.tol is None else self.tol
        lam_min = float(np.linalg.eigvalsh(m)[0])
        if not lam_min > tol:
            raise NotPositiveDefinite(
                f"smallest eigenvalue {lam_min:.6g} <= tolerance {tol:.6g}")
        object.__setattr__(self, "entries", _frozen(m))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        inv = np.linalg.inv(self.entries)
        return 0.5 * (inv + inv.T)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    @property
    def condition_number(self) -> float:
        lam = self.eigenvalues
        return float(lam[-1] / lam[0])

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def validate_spd(m, tol: float | None = None, strict: bool = False) -> CovMatrix:
    """Symmetrize ``m`` and check positive-definiteness.

    An asymmetry larger than ``SYM_RTOL`` relative to the largest entry emits a
    :class:`NotSymmetric` warning, or raises it when ``strict`` is set.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    scale = float(np.max(np.abs(m))) or 1.0
    asym = float(np.max(np.abs(m - m.T)))
    if asym > SYM_RTOL * scale:
        msg = f"asymmetry {asym:.3g} exceeds {SYM_RTOL:.0e} x scale; symmetrizing"
        if strict:
            raise NotSymmetric(msg)
        warnings.warn(msg, NotSymmetric, stacklevel=2)
    return CovMatrix(m, tol=tol)


@dataclass(frozen=True)
class PairStats:
    """Dispersion and correlation coefficient of two particles on a line."""

    sigma2: float
    r: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise DomainError(f"sigma2 must be finite and > 0, got {self.sigma2}")
        if not (math.isfinite(self.r) and abs(self.r) < 1):
            raise DomainError(f"|r| must be < 1, got {self.r}")

    @property
    def r_sigma4(self) -> float:
        return self.r * self.sigma2**2


def pair_covariance(p: PairStats) -> CovMatrix:
    """Covariance ``sigma2 * [[1, r], [r, 1]]`` of a two-particle pair."""
    off = p.r * p.sigma2
    return CovMatrix(np.array([[p.sigma2, off], [off, p.sigma2]]))


def extract_pair_stats(s, strict: bool = False, tol: float = 1e-12) -> PairStats:
    """Inverse of :func:`pair_covariance`.

    Unequal diagonals are averaged for the dispersion; ``strict`` rejects them
    when they differ by more than ``tol`` relative to their mean.
    """
    m = np.asarray(s, dtype=float)
    if m.shape != (2, 2):
        raise ValueError(f"pair statistics need a 2x2 matrix, got shape {m.shape}")
    a, b = m[0, 0], m[1, 1]
    if strict and abs(a - b) > tol * 0.5 * (a + b):
        raise DomainError(f"unequal dispersions {a} and {b} in strict mode")
    off = 0.5 * (m[0, 1] + m[1, 0])
    if a == b:
        return PairStats(sigma2=float(a), r=float(off / a))
    return PairStats(sigma2=float(0.5 * (a + b)), r=float(off / math.sqrt(a * b)))


@dataclass(frozen=True)
class GaussianState:
    """Covariance ``sigma`` and its time derivative ``sigma_dot`` at time ``t``."""

    sigma: CovMatrix
    sigma_dot: np.ndarray = None
    t: float = 0.0

    def __post_init__(self):
        if not isinstance(self.sigma, CovMatrix):
            object.__setattr__(self, "sigma", CovMatrix(self.sigma))
        d = self.sigma.dim
        if self.sigma_dot is None:
            sd = np.zeros((d, d))
        else:
            sd = np.array(self.sigma_dot, dtype=float).reshape(d, d)
        object.__setattr__(self, "sigma_dot", _frozen(0.5 * (sd + sd.T)))

    @property
    def dim(self) -> int:
        return self.sigma.dim
