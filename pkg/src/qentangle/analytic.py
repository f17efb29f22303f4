"""Closed-form covariance evolution of free Gaussian particles.

Three regimes have exact laws:

* vacuum:      ``Sigma(t) = Sigma0 + (hbar t / 2m)^2 Sigma0^-1``
* overdamped:  ``Sigma(t)^2 = Sigma0^2 + (hbar^2 t / m^2 gamma) I``
* classical:   ``Sigma(t) = Sigma0 + 2 D t I`` with ``D = kT / m gamma``

together with their two-particle reductions and the associated timescales.
The numerical integrators in :mod:`qentangle.dynamics` are checked against
these functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CovMatrix,
    DomainError,
    PairStats,
    PhysConsts,
    extract_pair_stats,
    pair_covariance,
)


def _require_time(t: float) -> float:
    t = float(t)
    if not (math.isfinite(t) and t >= 0):
        raise DomainError(f"time must be finite and >= 0, got {t}")
    return t


def _require_friction(c: PhysConsts) -> None:
    if c.gamma <= 0:
        raise DomainError("this regime needs gamma > 0")


# -- vacuum ------------------------------------------------------------------

def vacuum_covariance(sigma0: CovMatrix, t: float, c: PhysConsts) -> CovMatrix:
    """Position covariance of free particles after time ``t`` without friction."""
    t = _require_time(t)
    if t == 0:
        return sigma0
    a = (c.hbar * t / (2 * c.mass)) ** 2
    return CovMatrix(sigma0.entries + a * sigma0.inverse)


def momentum_covariance(sigma0: CovMatrix, c: PhysConsts) -> np.ndarray:
    """Conserved momentum covariance ``hbar^2 Sigma0^-1 / 4``.

    The sign of the off-diagonal entries is opposite to that of ``sigma0``:
    positional correlation means momentum anticorrelation.
    """
    return c.hbar**2 * sigma0.inverse / 4


def vacuum_pair(p0: PairStats, t: float, c: PhysConsts) -> PairStats:
    """Two-particle dispersion and correlation in vacuum."""
    t = _require_time(t)
    if t == 0:
        return p0
    s0 = p0.sigma2
    sigma2 = s0 + (c.hbar * t / (2 * c.mass)) ** 2 / (s0 * (1 - p0.r**2))
    return PairStats(sigma2=sigma2, r=(2 * s0 / sigma2 - 1) * p0.r)


def tau1(p0: PairStats, c: PhysConsts) -> float:
    """Vacuum decorrelation time, where the correlation coefficient crosses zero."""
    if not abs(p0.r) < 1:
        raise DomainError(f"|r0| must be < 1, got {p0.r}")
    return 2 * c.mass * p0.sigma2 * math.sqrt(1 - p0.r**2) / c.hbar


# -- strong friction ---------------------------------------------------------

def overdamped_covariance(sigma0: CovMatrix, t: float, c: PhysConsts) -> CovMatrix:
    """Principal square root of ``Sigma0^2 + (hbar^2 t / m^2 gamma) I``.

    ``Sigma0^2 + cI`` shares eigenvectors with ``Sigma0``, so the root is taken
    on the eigenvalues of ``Sigma0`` directly.
    """
    _require_friction(c)
    t = _require_time(t)
    if t == 0:
        return sigma0
    shift = c.hbar**2 * t / (c.mass**2 * c.gamma)
    lam, vec = np.linalg.eigh(sigma0.entries)
    root = np.sqrt(lam**2 + shift)
    return CovMatrix((vec * root) @ vec.T)


def tau2(p0: PairStats, c: PhysConsts) -> float:
    """Overdamped relaxation time ``gamma (m sigma0^2 / hbar)^2``."""
    _require_friction(c)
    return c.gamma * (c.mass * p0.sigma2 / c.hbar) ** 2


def overdamped_pair_r(r0: float, t: float, tau2: float) -> float:
    """Overdamped correlation coefficient, physical root of
    ``r0 r^2 - (1 + r0^2 + t/tau2) r + r0 = 0``.

    Evaluated as ``2 r0 / (b + sqrt(b^2 - 4 r0^2))``, algebraically the
    minus-sign root, which avoids cancellation and returns 0 at ``r0 = 0``.
    """
    if not abs(r0) < 1:
        raise DomainError(f"|r0| must be < 1, got {r0}")
    t = _require_time(t)
    if not tau2 > 0:
        raise DomainError(f"tau2 must be > 0, got {tau2}")
    b = 1 + r0**2 + t / tau2
    return 2 * r0 / (b + math.sqrt(b * b - 4 * r0**2))


def overdamped_pair(p0: PairStats, t: float, c: PhysConsts) -> PairStats:
    """Two-particle statistics in the overdamped regime.

    The dispersion follows from ``sigma^4 (1 + r^2) = sigma0^4 (1 + r0^2) +
    hbar^2 t / m^2 gamma``; the product ``r sigma^4`` stays at its initial value.
    """
    t = _require_time(t)
    if t == 0:
        return p0
    r = overdamped_pair_r(p0.r, t, tau2(p0, c))
    sigma4 = (p0.sigma2**2 * (1 + p0.r**2) + c.hbar**2 * t / (c.mass**2 * c.gamma)) / (1 + r * r)
    return PairStats(sigma2=math.sqrt(sigma4), r=r)


# -- classical diffusion -------------------------------------------------------

def classical_covariance(sigma0: CovMatrix, t: float, c: PhysConsts) -> CovMatrix:
    """Classical Einstein diffusion, ``Sigma0 + 2 D t I``."""
    _require_friction(c)
    if c.kbt <= 0:
        raise DomainError("classical diffusion needs kbt > 0")
    t = _require_time(t)
    if t == 0:
        return sigma0
    return CovMatrix(sigma0.entries + 2 * c.diffusion * t * np.eye(sigma0.dim))


def classical_pair(p0: PairStats, t: float, c: PhysConsts) -> PairStats:
    return extract_pair_stats(classical_covariance(pair_covariance(p0), t, c))


def tau3(p0: PairStats, c: PhysConsts) -> float:
    """Classical relaxation time ``gamma m sigma0^2 / 2 kT``."""
    _require_friction(c)
    if c.kbt <= 0:
        raise DomainError("tau3 needs kbt > 0")
    return c.gamma * c.mass * p0.sigma2 / (2 * c.kbt)


# -- derived observables -------------------------------------------------------

def energy(sigma2: float, c: PhysConsts) -> float:
    """Kinetic energy scale ``hbar^2 / (2 m sigma^2)`` of a packet of dispersion sigma2."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be > 0, got {sigma2}")
    return c.hbar**2 / (2 * c.mass * sigma2)


@dataclass(frozen=True)
class Timescales:
    """Characteristic times of a pair; a field is ``None`` when its regime
    parameters are absent (``gamma = 0`` for tau2, ``kbt = 0`` for tau3)."""

    tau1: float
    tau2: float | None = None
    tau3: float | None = None


def timescales(p0: PairStats, c: PhysConsts) -> Timescales:
    return Timescales(
        tau1=tau1(p0, c),
        tau2=tau2(p0, c) if c.gamma > 0 else None,
        tau3=tau3(p0, c) if c.gamma > 0 and c.kbt > 0 else None,
    )
