"""Hydrodynamic fields of a zero-mean Gaussian state.

For ``rho = |2 pi S|^-1/2 exp(-x.S^-1.x / 2)`` every field is linear or
quadratic in ``x``, so spatial derivatives are evaluated in closed form:

* velocity  ``v = S' S^-1 x / 2``
* quantum potential ``Q = (hbar^2 / 4m) tr S^-1 - (hbar^2 / 8m) x.S^-2.x``,
  from ``Q = -hbar^2 lap(sqrt rho) / (2 m sqrt rho)`` with
  ``grad sqrt(rho) = -S^-1 x sqrt(rho) / 2``
* quantum force ``-grad Q = hbar^2 S^-2 x / 4m``

Time derivatives in :func:`hydro_residuals` come from a three-point stencil.
Monte Carlo helpers draw from seeded, independently spawned streams and
report a standard error with every estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GaussianState, PhysConsts


def _vec(s: GaussianState, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != s.dim:
        raise ValueError(f"position has dimension {x.shape[-1]}, state has {s.dim}")
    return x


def density(s: GaussianState, x) -> np.ndarray:
    """Gaussian probability density at ``x`` (last axis is the coordinate)."""
    x = _vec(s, x)
    inv = s.sigma.inverse
    sign, logdet = np.linalg.slogdet(2 * np.pi * s.sigma.entries)
    quad = np.einsum("...i,ij,...j->...", x, inv, x)
    return np.exp(-0.5 * logdet - 0.5 * quad)


def density_gradient(s: GaussianState, x) -> np.ndarray:
    x = _vec(s, x)
    return -(x @ s.sigma.inverse) * density(s, x)[..., None]


def velocity(s: GaussianState, x) -> np.ndarray:
    """Linear velocity field ``S' S^-1 x / 2``."""
    x = _vec(s, x)
    a = s.sigma_dot @ s.sigma.inverse / 2
    return x @ a.T


def quantum_potential(s: GaussianState, x, c: PhysConsts) -> np.ndarray:
    x = _vec(s, x)
    inv = s.sigma.inverse
    inv2 = inv @ inv
    quad = np.einsum("...i,ij,...j->...", x, inv2, x)
    return c.hbar**2 / (4 * c.mass) * np.trace(inv) - c.hbar**2 / (8 * c.mass) * quad


def quantum_force(s: GaussianState, x, c: PhysConsts) -> np.ndarray:
    """``-grad Q``; couples every coordinate through ``S^-2``."""
    x = _vec(s, x)
    inv = s.sigma.inverse
    return c.hbar**2 / (4 * c.mass) * x @ (inv @ inv).T


@dataclass(frozen=True)
class FieldPoint:
    x: np.ndarray
    rho: float
    v: np.ndarray
    q: float
    force: np.ndarray


def field_point(s: GaussianState, x, c: PhysConsts) -> FieldPoint:
    x = np.asarray(x, dtype=float)
    return FieldPoint(x=x, rho=float(density(s, x)), v=velocity(s, x),
                      q=float(quantum_potential(s, x, c)), force=quantum_force(s, x, c))


def fick_residual(s: GaussianState, x) -> np.ndarray:
    """``rho v + S' grad(rho) / 2``, identically zero for a Gaussian."""
    x = _vec(s, x)
    flux = density(s, x)[..., None] * velocity(s, x)
    return flux + density_gradient(s, x) @ s.sigma_dot.T / 2


def fick_relative_residual(s: GaussianState, x) -> np.ndarray:
    x = _vec(s, x)
    flux = density(s, x)[..., None] * velocity(s, x)
    res = fick_residual(s, x)
    scale = np.linalg.norm(flux, axis=-1)
    return np.linalg.norm(res, axis=-1) / np.where(scale > 0, scale, 1.0)


class StencilError(ValueError):
    """Time stencil is malformed or wider than allowed."""


def hydro_residuals(s_before: GaussianState, s_at: GaussianState, s_after: GaussianState,
                    x, c: PhysConsts, gamma: float | None = None,
                    max_width: float | None = None) -> tuple[float, np.ndarray]:
    """Pointwise residuals of the continuity and damped momentum equations.

    Returns ``(d rho/dt + div(rho v), dv/dt + (v.grad) v + gamma v + grad Q / m)``
    at ``x`` and time ``s_at.t``. Time derivatives use the centered difference
    over ``s_before`` and ``s_after`` (equal spacing required); spatial
    derivatives are exact. ``gamma`` defaults to ``c.gamma``.
    """
    gamma = c.gamma if gamma is None else gamma
    h1 = s_at.t - s_before.t
    h2 = s_after.t - s_at.t
    if not (h1 > 0 and h2 > 0) or abs(h1 - h2) > 1e-9 * max(h1, h2):
        raise StencilError(f"stencil must be centred and increasing, got steps {h1}, {h2}")
    if max_width is not None and h1 + h2 > max_width:
        raise StencilError(f"stencil width {h1 + h2} exceeds {max_width}")
    x = _vec(s_at, x)
    width = s_after.t - s_before.t

    rho = density(s_at, x)
    a = s_at.sigma_dot @ s_at.sigma.inverse / 2
    v = x @ a.T
    drho_dt = (density(s_after, x) - density(s_before, x)) / width
    # div(rho v) = v.grad(rho) + rho tr(A)
    div_flux = np.sum(v * density_gradient(s_at, x), axis=-1) + rho * np.trace(a)
    continuity = drho_dt + div_flux

    dv_dt = (velocity(s_after, x) - velocity(s_before, x)) / width
    advect = v @ a.T
    momentum = dv_dt + advect + gamma * v - quantum_force(s_at, x, c) / c.mass
    return float(continuity), momentum


def universal_integral(s: GaussianState, c: PhysConsts) -> np.ndarray:
    """Closed-form ``-<S x (grad Q)^T> / m`` using ``<x x^T> = S``.

    Equals ``(hbar / 2m)^2 I`` for every covariance.
    """
    sig = s.sigma.entries
    inv = s.sigma.inverse
    # grad Q = -hbar^2 S^-2 x / 4m, so <x (grad Q)^T> = -hbar^2 S S^-2 / 4m
    return sig @ sig @ (inv @ inv) * c.hbar**2 / (4 * c.mass**2)


def fourth_moment_check(s: GaussianState) -> float:
    """``<x1 x2^3>`` of a two-coordinate Gaussian, ``3 S12 S22`` by Isserlis."""
    if s.dim != 2:
        raise ValueError(f"fourth moment check needs a 2-d state, got dim {s.dim}")
    m = s.sigma.entries
    return 3 * m[0, 1] * m[1, 1]


# -- Monte Carlo ---------------------------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def within(self, expected, n_sigma: float = 3.0) -> bool:
        dev = np.abs(np.asarray(self.mean) - np.asarray(expected))
        return bool(np.all(dev <= n_sigma * np.asarray(self.stderr) + 1e-15))


def _streams(seed: int, n: int, n_streams: int):
    children = np.random.SeedSequence(seed).spawn(n_streams)
    sizes = [n // n_streams + (1 if i < n % n_streams else 0) for i in range(n_streams)]
    return [(np.random.default_rng(ch), k) for ch, k in zip(children, sizes)]


def _mc_mean(sample_fn, seed: int, n: int, n_streams: int) -> MCEstimate:
    # partial sums per stream; merging sums keeps the result order-independent
    total = None
    total_sq = None
    for rng, k in _streams(seed, n, n_streams):
        vals = sample_fn(rng, k)
        part, part_sq = vals.sum(axis=0), (vals**2).sum(axis=0)
        total = part if total is None else total + part
        total_sq = part_sq if total_sq is None else total_sq + part_sq
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0) * n / (n - 1)
    return MCEstimate(mean=mean, stderr=np.sqrt(var / n), n=n)


def sample_positions(s: GaussianState, rng: np.random.Generator, n: int) -> np.ndarray:
    lower = np.linalg.cholesky(s.sigma.entries)
    return rng.standard_normal((n, s.dim)) @ lower.T


def mc_universal_integral(s: GaussianState, c: PhysConsts, n: int = 10**6, seed: int = 0,
                          n_streams: int = 8) -> MCEstimate:
    """Sampled ``-<S x (grad Q)^T> / m`` with per-entry standard errors."""
    sig = s.sigma.entries

    def sample(rng, k):
        x = sample_positions(s, rng, k)
        sx = x @ sig.T
        f = quantum_force(s, x, c) / c.mass
        return np.einsum("ni,nj->nij", sx, f)

    return _mc_mean(sample, seed, n, n_streams)


def mc_fourth_moment(s: GaussianState, n: int = 10**6, seed: int = 0, n_streams: int = 8) -> MCEstimate:
    if s.dim != 2:
        raise ValueError(f"fourth moment check needs a 2-d state, got dim {s.dim}")

    def sample(rng, k):
        x = sample_positions(s, rng, k)
        return x[:, 0] * x[:, 1] ** 3

    return _mc_mean(sample, seed, n, n_streams)


def mc_normalization(s: GaussianState, n: int = 10**6, seed: int = 0, n_streams: int = 8,
                     half_width: float = 8.0) -> MCEstimate:
    """Integral of the density over a box of ``half_width`` standard deviations
    along every eigen-direction, by uniform sampling."""
    lam, vec = np.linalg.eigh(s.sigma.entries)
    half = half_width * np.sqrt(lam)
    volume = float(np.prod(2 * half))

    def sample(rng, k):
        u = rng.uniform(-1.0, 1.0, size=(k, s.dim)) * half
        return volume * density(s, u @ vec.T)

    return _mc_mean(sample, seed, n, n_streams)


def gaussian_box_mass(d: int, half_width: float) -> float:
    """Probability mass of a standard normal inside ``[-w, w]^d``."""
    return math.erf(half_width / math.sqrt(2)) ** d
