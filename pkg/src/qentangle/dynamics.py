"""Numerical integration of Gaussian covariance dynamics.

Three equations are integrated:

``integrate_eq7``
    Second-order matrix ODE for a damped free Gaussian,
    ``S'' - S' S^-1 S' / 2 + gamma S' = (hbar/m)^2 S^-1 / 2``,
    solved as a first-order system in ``(S, S')``.
``integrate_ermakov``
    Its scalar reduction for uncorrelated particles,
    ``s'' + gamma s' = (hbar/2m)^2 / s^3`` with ``S = s^2``.
``integrate_thermo_moments``
    Overdamped thermo-quantum diffusion reduced to the covariance,
    ``S' = (hbar^2 / 2 m^2 gamma) S^-1 + 2 D I``.

The last one follows from inserting the Gaussian density and the linear
quantum force ``-grad Q = hbar^2 S^-2 x / 4m`` into the drift-diffusion
equation: the flux is ``rho B x`` with the symmetric
``B = hbar^2 S^-2 / (4 m^2 gamma) + D S^-1``, and a linear velocity field
``B x`` moves the covariance as ``S' = B S + S B``. The Gaussian shape is
preserved exactly, so the reduction is not an approximation.

The default integrator is an adaptive Dormand-Prince 5(4) pair that lands
on every output time, symmetrizes the state and checks positive-definiteness
after each accepted step. ``method="rk4"`` runs classical fixed-step RK4 and
``method="radau"`` hands the stiff large-friction case to
:func:`scipy.integrate.solve_ivp`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from . import analytic
from .core import (
    SPD_RTOL,
    CovMatrix,
    DomainError,
    GaussianState,
    PairStats,
    PhysConsts,
    extract_pair_stats,
    pair_covariance,
    spd_tolerance,
)

METHODS = ("dopri5", "rk4", "radau")


class SolverError(RuntimeError):
    """Integration failed; ``t`` is the time at which it stopped."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t = {t:.17g})")
        self.t = t


class StepSizeUnderflow(SolverError):
    """Adaptive step fell below ``min_step``; the problem is too stiff."""


class SpdLost(SolverError):
    """Covariance lost positive-definiteness during integration."""


class SingularSigma(SolverError):
    """Covariance could not be factorized inside the right-hand side."""


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    max_step: float = math.inf
    min_step: float = 1e-12
    spd_check_every_step: bool = True
    method: str = "dopri5"
    #: fixed step of the rk4 method; defaults to ``max_step``
    rk4_step: float | None = None
    max_steps: int = 5_000_000

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be > 0, got {self.abs_tol}")
        if not self.min_step < self.max_step:
            raise ValueError("min_step must be smaller than max_step")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "rk4" and not math.isfinite(self.rk4_step or self.max_step):
            raise ValueError("rk4 needs a finite rk4_step or max_step")


@dataclass
class Trajectory:
    """Gaussian states on an output grid, with derived observables.

    ``observables`` maps names to arrays aligned with ``times``:
    ``sigma2``, ``r``, ``r_sigma4``, ``energy``, ``momentum_cov_residual`` and
    ``ode_residual``. Pair statistics use the leading 2x2 block.
    """

    times: np.ndarray
    states: tuple[GaussianState, ...]
    regime: str
    consts: PhysConsts
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def sigma(self) -> np.ndarray:
        return np.stack([s.sigma.entries for s in self.states])

    @property
    def sigma_dot(self) -> np.ndarray:
        return np.stack([s.sigma_dot for s in self.states])

    def __len__(self):
        return len(self.times)


@dataclass
class ScalarTrajectory:
    """Width ``sigma(t)`` of an uncorrelated packet and its rate."""

    times: np.ndarray
    sigma: np.ndarray
    sigma_dot: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma**2


# -- generic steppers ----------------------------------------------------------

# Dormand-Prince 5(4) tableau
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _check_grid(grid, t0: float) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("time grid must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(grid)):
        raise ValueError("time grid has non-finite entries")
    if grid[0] != t0:
        raise ValueError(f"time grid must start at the initial time {t0}, got {grid[0]}")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return grid


def _initial_step(f, t0, y0, f0, cfg: SolverConfig, span: float) -> float:
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span, cfg.max_step)
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span, cfg.max_step)


def _dopri5(f, y0, grid, cfg: SolverConfig, accept: Callable[[float, np.ndarray], np.ndarray]):
    """Adaptive DOPRI5 landing exactly on every grid time.

    ``accept(t, y)`` post-processes each accepted state (symmetrization,
    SPD checks) and returns the state to continue from.
    """
    ys = np.empty((grid.size, y0.size))
    local_err = np.zeros(grid.size)
    ys[0] = y0
    t, y = grid[0], y0.copy()
    k = np.empty((7, y0.size))
    k[0] = f(t, y)
    nfev, steps, rejected = 1, 0, 0
    if grid.size == 1:
        return ys, local_err, dict(method="dopri5", steps=0, rejected=0, nfev=nfev)
    h = _initial_step(f, t, y, k[0], cfg, grid[-1] - grid[0])
    nfev += 1
    for i in range(1, grid.size):
        target = grid[i]
        last_err = 0.0
        while t < target:
            if steps + rejected >= cfg.max_steps:
                raise SolverError(f"exceeded {cfg.max_steps} steps", t)
            h = min(h, cfg.max_step)
            if h < cfg.min_step:
                raise StepSizeUnderflow(f"step {h:.3g} below min_step {cfg.min_step:.3g}", t)
            remaining = target - t
            # no sliver steps right before an output time
            landing = h >= remaining or remaining - h < 1e-3 * h
            h_try = remaining if landing else h
            for s in range(1, 7):
                k[s] = f(t + _C[s] * h_try, y + h_try * np.dot(_A[s], k[:s]))
            nfev += 6
            y_new = y + h_try * np.dot(_B[:6], k[:6])
            err_vec = h_try * np.dot(_E, k)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
            if err <= 1.0:
                t = target if landing else t + h_try
                y_acc = accept(t, y_new)
                if y_acc is y_new or np.array_equal(y_acc, y_new):
                    k[0] = k[6]
                else:
                    k[0] = f(t, y_acc)
                    nfev += 1
                y = y_acc
                steps += 1
                last_err = err
                fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                # a landing step was clipped, keep the unclipped proposal
                h = max(h, h_try * fac) if landing else h_try * fac
            else:
                rejected += 1
                h = h_try * max(0.2, 0.9 * err ** -0.2)
        ys[i] = y
        local_err[i] = last_err
    return ys, local_err, dict(method="dopri5", steps=steps, rejected=rejected, nfev=nfev)


def _rk4(f, y0, grid, cfg: SolverConfig, accept):
    h_nominal = cfg.rk4_step or cfg.max_step
    ys = np.empty((grid.size, y0.size))
    ys[0] = y0
    y = y0.copy()
    steps = 0
    for i in range(1, grid.size):
        t0, t1 = grid[i - 1], grid[i]
        n = max(1, math.ceil((t1 - t0) / h_nominal - 1e-9))
        h = (t1 - t0) / n
        for j in range(n):
            t = t0 + j * h
            k1 = f(t, y)
            k2 = f(t + h / 2, y + h / 2 * k1)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t + h, y + h * k3)
            y = accept(t + h, y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
            steps += 1
        ys[i] = y
    return ys, np.full(grid.size, np.nan), dict(method="rk4", steps=steps, rejected=0, nfev=4 * steps)


def _radau(f, y0, grid, cfg: SolverConfig, accept):
    ys = np.empty((grid.size, y0.size))
    ys[0] = y0
    y = y0.copy()
    stats = dict(method="radau", steps=0, rejected=0, nfev=0, njev=0, nlu=0)
    first_step = None
    for i in range(1, grid.size):
        if first_step is not None:
            first_step = min(first_step, grid[i] - grid[i - 1])
        sol = solve_ivp(f, (grid[i - 1], grid[i]), y, method="Radau", rtol=cfg.rel_tol,
                        atol=cfg.abs_tol, max_step=cfg.max_step, first_step=first_step)
        if not sol.success:
            raise StepSizeUnderflow(f"radau failed: {sol.message}", float(sol.t[-1]))
        y = accept(grid[i], sol.y[:, -1])
        ys[i] = y
        stats["steps"] += sol.t.size - 1
        stats["nfev"] += sol.nfev
        stats["njev"] += sol.njev
        stats["nlu"] += sol.nlu
        if sol.t.size > 1:
            first_step = min(float(sol.t[-1] - sol.t[-2]), cfg.max_step)
    return ys, np.full(grid.size, np.nan), stats


_STEPPERS = {"dopri5": _dopri5, "rk4": _rk4, "radau": _radau}


# -- matrix plumbing -----------------------------------------------------------

def _inverse(s: np.ndarray, t: float) -> np.ndarray:
    try:
        lower = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise SingularSigma("covariance is not factorizable", t) from None
    inv_l = np.linalg.inv(lower)
    return inv_l.T @ inv_l


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _make_accept(d: int, n_blocks: int, cfg: SolverConfig):
    """Symmetrize each d x d block of the flat state and guard the first block."""

    def accept(t, y):
        blocks = y.reshape(n_blocks, d, d)
        blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
        if cfg.spd_check_every_step:
            s = blocks[0]
            tol = spd_tolerance(s)
            if not np.all(np.isfinite(s)) or np.linalg.eigvalsh(s)[0] <= tol:
                raise SpdLost("covariance lost positive-definiteness", t)
        return blocks.reshape(-1)

    return accept


def _observables(sigmas: np.ndarray, sigma_dots: np.ndarray, c: PhysConsts, regime: str):
    n, d = sigmas.shape[0], sigmas.shape[1]
    sigma2 = np.empty(n)
    r = np.zeros(n)
    for i, s in enumerate(sigmas):
        if d >= 2:
            p = extract_pair_stats(s[:2, :2])
            sigma2[i], r[i] = p.sigma2, p.r
        else:
            sigma2[i] = s[0, 0]
    obs = dict(
        sigma2=sigma2,
        r=r,
        r_sigma4=r * sigma2**2,
        energy=c.hbar**2 / (2 * c.mass * sigma2),
    )
    if regime == "vacuum":
        pp = np.stack([momentum_from_state(s, sd, c) for s, sd in zip(sigmas, sigma_dots)])
        ref = pp[0]
        obs["momentum_cov_residual"] = np.max(np.abs(pp - ref), axis=(1, 2)) / np.max(np.abs(ref))
    else:
        obs["momentum_cov_residual"] = np.full(n, np.nan)
    return obs


def momentum_from_state(sigma, sigma_dot, c: PhysConsts) -> np.ndarray:
    """Momentum covariance of a Gaussian state, ``m^2 <v v> + hbar^2 S^-1 / 4``.

    The first term is the flow contribution of the velocity field
    ``S' S^-1 x / 2``; the second is the osmotic part from the amplitude.
    In vacuum this equals ``hbar^2 S0^-1 / 4`` at every time.
    """
    sigma = np.asarray(sigma, dtype=float)
    sigma_dot = np.asarray(sigma_dot, dtype=float)
    inv = np.linalg.inv(sigma)
    return _sym(c.mass**2 * sigma_dot @ inv @ sigma_dot / 4 + c.hbar**2 * inv / 4)


def trajectory_from_covariances(times, sigmas, sigma_dots, c: PhysConsts, regime: str,
                                local_err=None, stats: dict | None = None) -> Trajectory:
    """Wrap per-time covariances and rates into a :class:`Trajectory`."""
    times = np.asarray(times, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    sigma_dots = np.asarray(sigma_dots, dtype=float)
    states = tuple(
        GaussianState(CovMatrix(s), sd, float(t)) for s, sd, t in zip(sigmas, sigma_dots, times)
    )
    obs = _observables(sigmas, sigma_dots, c, regime)
    obs["ode_residual"] = np.full(times.size, np.nan) if local_err is None else np.asarray(local_err)
    stats = dict(stats or {})
    stats["max_condition_number"] = float(max(st.sigma.condition_number for st in states))
    return Trajectory(times=times, states=states, regime=regime, consts=c, observables=obs, stats=stats)


def _build(grid, ys, local_err, stats, d, n_blocks, c, regime, sdot_fn=None) -> Trajectory:
    blocks = ys.reshape(grid.size, n_blocks, d, d)
    sigmas = blocks[:, 0]
    if n_blocks == 2:
        sigma_dots = blocks[:, 1]
    else:
        sigma_dots = np.stack([sdot_fn(t, s) for t, s in zip(grid, sigmas)])
    return trajectory_from_covariances(grid, sigmas, sigma_dots, c, regime, local_err, stats)


# -- public integrators --------------------------------------------------------

def integrate_eq7(s0: GaussianState, c: PhysConsts, grid, cfg: SolverConfig = SolverConfig()) -> Trajectory:
    """Integrate the damped covariance equation from ``s0`` over ``grid``.

    With ``c.gamma == 0`` and ``s0.sigma_dot == 0`` the exact solution is
    :func:`qentangle.analytic.vacuum_covariance`.
    """
    grid = _check_grid(grid, s0.t)
    d = s0.dim
    q = (c.hbar / c.mass) ** 2 / 2
    gamma = c.gamma

    def rhs(t, y):
        s = y[: d * d].reshape(d, d)
        v = y[d * d:].reshape(d, d)
        inv = _inverse(s, t)
        acc = v @ inv @ v / 2 - gamma * v + q * inv
        return np.concatenate([v.reshape(-1), acc.reshape(-1)])

    y0 = np.concatenate([s0.sigma.entries.reshape(-1), s0.sigma_dot.reshape(-1)])
    ys, err, stats = _STEPPERS[cfg.method](rhs, y0, grid, cfg, _make_accept(d, 2, cfg))
    regime = "vacuum" if gamma == 0 else "friction"
    return _build(grid, ys, err, stats, d, 2, c, regime)


def integrate_ermakov(sigma0: float, sigma_dot0: float, c: PhysConsts, grid,
                      cfg: SolverConfig = SolverConfig(), t0: float = 0.0) -> ScalarTrajectory:
    """Integrate ``s'' + gamma s' = (hbar / 2m)^2 / s^3`` for the packet width ``s``."""
    if not sigma0 > 0:
        raise DomainError(f"sigma0 must be > 0, got {sigma0}")
    grid = _check_grid(grid, t0)
    q = (c.hbar / (2 * c.mass)) ** 2
    gamma = c.gamma

    def rhs(t, y):
        return np.array([y[1], q / y[0] ** 3 - gamma * y[1]])

    def accept(t, y):
        if cfg.spd_check_every_step and not y[0] > 0:
            raise SpdLost("width became non-positive", t)
        return y

    ys, _, stats = _STEPPERS[cfg.method](rhs, np.array([sigma0, sigma_dot0], dtype=float), grid, cfg, accept)
    return ScalarTrajectory(times=grid, sigma=ys[:, 0], sigma_dot=ys[:, 1], stats=stats)


def integrate_thermo_moments(sigma0: CovMatrix, c: PhysConsts, grid,
                             cfg: SolverConfig = SolverConfig(), quantum: bool = True,
                             t0: float = 0.0) -> Trajectory:
    """Integrate ``S' = (hbar^2 / 2 m^2 gamma) S^-1 + 2 D I``.

    ``quantum=False`` drops the quantum-potential term, leaving classical
    Einstein diffusion. With ``c.kbt == 0`` the exact solution is
    :func:`qentangle.analytic.overdamped_covariance`.
    """
    if c.gamma <= 0:
        raise DomainError("thermo-quantum diffusion needs gamma > 0")
    grid = _check_grid(grid, t0)
    d = sigma0.dim
    q = c.hbar**2 / (2 * c.mass**2 * c.gamma) if quantum else 0.0
    drift = 2 * c.diffusion * np.eye(d)

    def sdot(t, s):
        if q == 0:
            return drift.copy()
        return q * _inverse(s, t) + drift

    def rhs(t, y):
        return sdot(t, y.reshape(d, d)).reshape(-1)

    ys, err, stats = _STEPPERS[cfg.method](rhs, sigma0.entries.reshape(-1).copy(), grid, cfg,
                                           _make_accept(d, 1, cfg))
    if not quantum:
        regime = "classical"
    elif c.kbt == 0:
        regime = "overdamped"
    else:
        regime = "thermo"
    return _build(grid, ys, err, stats, d, 1, c, regime, sdot_fn=sdot)


# -- invariant monitoring ------------------------------------------------------

@dataclass(frozen=True)
class InvariantReport:
    """Per-time relative drift of a monitored quantity.

    ``conserved`` says whether the quantity is an exact integral of motion in
    this regime; for non-conserved quantities a nonzero drift is expected.
    """

    quantity: str
    conserved: bool
    times: np.ndarray
    drift: np.ndarray
    tol: float
    max_drift: float
    first_exceed_time: float | None

    @property
    def ok(self) -> bool:
        return self.first_exceed_time is None


def _entry_deviation(a: np.ndarray, ref: np.ndarray) -> float:
    # entries normalized by sqrt(S_ii S_jj) so zero crossings of
    # off-diagonal entries stay well defined
    diag = np.sqrt(np.abs(np.diag(ref)))
    return float(np.max(np.abs(a - ref) / np.outer(diag, diag)))


def covariance_deviation(sigmas: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Per-time max entry deviation, each entry scaled by ``sqrt(S_ii S_jj)``."""
    return np.array([_entry_deviation(a, b) for a, b in zip(sigmas, refs)])


def oracle_covariances(traj: Trajectory, sigma0: CovMatrix | None = None) -> np.ndarray | None:
    """Closed-form covariances matching ``traj.regime``, or ``None`` if none exists.

    Friction trajectories are compared with the overdamped law, their
    strong-friction limit.
    """
    c = traj.consts
    s0 = sigma0 or traj.states[0].sigma
    t0 = traj.times[0]
    law = {
        "vacuum": analytic.vacuum_covariance,
        "friction": analytic.overdamped_covariance,
        "overdamped": analytic.overdamped_covariance,
        "classical": analytic.classical_covariance,
    }.get(traj.regime)
    if law is None:
        return None
    return np.stack([law(s0, t - t0, c).entries for t in traj.times])


def monitor_invariants(traj: Trajectory, c: PhysConsts | None = None, tol: float | None = None) -> InvariantReport:
    """Track the regime's integral of motion along a trajectory.

    * vacuum: deviation from the closed-form vacuum covariance (assumes a
      state with zero initial rate, as in a real Gaussian packet);
    * overdamped: relative drift of ``r sigma^4``;
    * friction, thermo, classical: drift of ``r sigma^4`` as well, which is not
      conserved there (``conserved=False``).
    """
    c = c or traj.consts
    regime = traj.regime
    if regime == "vacuum":
        sigmas = traj.sigma
        refs = np.stack([analytic.vacuum_covariance(traj.states[0].sigma, t - traj.times[0], c).entries
                         for t in traj.times])
        drift = covariance_deviation(sigmas, refs)
        quantity, conserved = "vacuum_covariance", True
        default_tol = 1e-8
    else:
        rs4 = traj.observables["r_sigma4"]
        ref = rs4[0]
        denom = abs(ref) if ref != 0 else 1.0
        drift = np.abs(rs4 - ref) / denom
        quantity = "r_sigma4"
        conserved = regime == "overdamped"
        default_tol = 1e-10 if conserved else math.inf
    tol = default_tol if tol is None else tol
    over = np.nonzero(drift > tol)[0]
    return InvariantReport(
        quantity=quantity,
        conserved=conserved,
        times=traj.times,
        drift=drift,
        tol=tol,
        max_drift=float(np.max(drift)),
        first_exceed_time=float(traj.times[over[0]]) if over.size else None,
    )


def pair_state(p: PairStats) -> GaussianState:
    """Real Gaussian pair at t = 0 (zero covariance rate)."""
    return GaussianState(pair_covariance(p))


__all__ = [
    "SPD_RTOL",
    "InvariantReport",
    "ScalarTrajectory",
    "SingularSigma",
    "SolverConfig",
    "SolverError",
    "SpdLost",
    "StepSizeUnderflow",
    "Trajectory",
    "covariance_deviation",
    "integrate_eq7",
    "integrate_ermakov",
    "integrate_thermo_moments",
    "momentum_from_state",
    "monitor_invariants",
    "oracle_covariances",
    "pair_state",
    "trajectory_from_covariances",
]
