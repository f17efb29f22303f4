"""Scenario execution, parameter sweeps and result aggregation.

A run writes two files into its output directory:

``series.csv``
    Columns ``t, sigma2, r, r_sigma4, energy, invariant_drift,
    oracle_deviation`` with 17 significant digits; missing values are ``nan``.
``summary.json``
    Scenario echo, solver statistics, timescales, verdicts and environment
    metadata. Only this file carries a timestamp.

Files are written to a temporary name and renamed, so a failed run leaves
no partial output behind.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import itertools
import json
import math
import os
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import analytic, madelung
from .core import COND_WARN, DomainError, GaussianState, PairStats
from .dynamics import (
    SolverError,
    Trajectory,
    covariance_deviation,
    integrate_eq7,
    integrate_thermo_moments,
    monitor_invariants,
    oracle_covariances,
    trajectory_from_covariances,
)
from .scenario import (
    SCHEMA_VERSION,
    Scenario,
    ScenarioError,
    ScenarioParseError,
    load_scenario,
    parse_scenario_text,
    scenario_from_dict,
    set_path,
)

COLUMNS = ("t", "sigma2", "r", "r_sigma4", "energy", "invariant_drift", "oracle_deviation")

#: pass thresholds attached to run summaries
VACUUM_ORACLE_TOL = 1e-8
OVERDAMPED_ORACLE_TOL = 1e-8
CLASSICAL_ORACLE_TOL = 1e-12
INVARIANT_TOL_NUMERIC = 1e-7
INVARIANT_TOL_ANALYTIC = 1e-10
FRICTION_LIMIT_TOL = 0.01
DECORRELATION_TOL = 1e-6
COLLAPSE_TOL = 1e-6
WEAK_CORRELATION_TOL = 0.01
WEAK_CORRELATION_R0 = 0.1


class ReportError(ValueError):
    """Results directory is missing, empty or unreadable."""


class CorruptResults(ReportError):
    """An index, summary or series file could not be parsed."""


@dataclass
class RunResult:
    scenario_id: str
    regime: str
    series: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    trajectory: Trajectory | None = field(default=None, repr=False)

    def verdict(self, name: str) -> dict:
        for v in self.meta["verdicts"]:
            if v["name"] == name:
                return v
        raise KeyError(name)


# -- trajectories ------------------------------------------------------------------

def analytic_trajectory(regime: str, sigma0, c, grid) -> Trajectory:
    """Closed-form covariances and rates on ``grid`` for the solvable regimes."""
    grid = np.asarray(grid, dtype=float)
    d = sigma0.dim
    if regime == "vacuum":
        sig = [analytic.vacuum_covariance(sigma0, t, c).entries for t in grid]
        inv0 = sigma0.inverse
        sdot = [c.hbar**2 * t / (2 * c.mass**2) * inv0 for t in grid]
    elif regime == "overdamped":
        covs = [analytic.overdamped_covariance(sigma0, t, c) for t in grid]
        sig = [s.entries for s in covs]
        sdot = [c.hbar**2 / (2 * c.mass**2 * c.gamma) * s.inverse for s in covs]
    elif regime == "classical":
        sig = [analytic.classical_covariance(sigma0, t, c).entries for t in grid]
        sdot = [2 * c.diffusion * np.eye(d) for _ in grid]
    else:
        raise ScenarioError(f"regime {regime} has no closed form")
    return trajectory_from_covariances(grid, np.stack(sig), np.stack(sdot), c, regime,
                                       local_err=np.zeros(grid.size), stats={"method": "analytic"})


def simulate(sc: Scenario) -> Trajectory:
    c = sc.consts
    if sc.mode == "analytic":
        return analytic_trajectory(sc.regime, sc.initial, c, sc.time_grid)
    if sc.regime in ("vacuum", "friction"):
        s0 = GaussianState(sc.initial, sc.sigma_dot0, 0.0)
        return integrate_eq7(s0, c, sc.time_grid, sc.solver)
    return integrate_thermo_moments(sc.initial, c, sc.time_grid, sc.solver,
                                    quantum=sc.regime != "classical")


def _has_exact_oracle(sc: Scenario, traj: Trajectory) -> bool:
    if traj.regime == "vacuum":
        return sc.sigma_dot0 is None or not np.any(sc.sigma_dot0)
    return traj.regime in ("friction", "overdamped", "classical")


# -- run ------------------------------------------------------------------------------

def _timescales(p0: PairStats, c) -> dict:
    out = {}
    for name, fn in (("tau1", analytic.tau1), ("tau2", analytic.tau2), ("tau3", analytic.tau3)):
        try:
            out[name] = fn(p0, c)
        except DomainError:
            out[name] = None
    return out


def _verdict(name: str, value: float, threshold: float, passed: bool | None = None) -> dict:
    value = float(value)
    ok = value <= threshold if passed is None else passed
    return dict(name=name, value=value, threshold=float(threshold), passed=bool(ok))


def _pair_limit_deviation(traj: Trajectory, p0: PairStats) -> tuple[float, float]:
    """Max relative deviation of (sigma2, r) from the overdamped pair law for t >= 10/gamma."""
    c = traj.consts
    mask = traj.times >= 10 / c.gamma
    if not np.any(mask):
        return math.nan, math.nan
    ds, dr = 0.0, 0.0
    for t, s2, r in zip(traj.times[mask], traj.observables["sigma2"][mask], traj.observables["r"][mask]):
        ref = analytic.overdamped_pair(p0, t, c)
        ds = max(ds, abs(s2 - ref.sigma2) / ref.sigma2)
        if ref.r != 0:
            dr = max(dr, abs(r - ref.r) / abs(ref.r))
    return ds, dr


def _verdicts(sc: Scenario, traj: Trajectory, series: dict, p0: PairStats, scales: dict) -> list[dict]:
    out = []
    numeric = sc.mode == "numeric"
    dev = series["oracle_deviation"]
    drift = series["invariant_drift"]
    if traj.regime == "vacuum" and _has_exact_oracle(sc, traj):
        out.append(_verdict("vacuum_oracle_deviation", np.nanmax(dev), VACUUM_ORACLE_TOL))
        tau1 = scales["tau1"]
        near = np.nonzero(np.isclose(traj.times, tau1, rtol=1e-9, atol=0))[0]
        if near.size and sc.initial.dim == 2:
            k = near[0]
            out.append(_verdict("decorrelation_at_tau1", abs(series["r"][k]), DECORRELATION_TOL))
            out.append(_verdict("dispersion_doubles_at_tau1",
                                abs(series["sigma2"][k] / p0.sigma2 - 2), DECORRELATION_TOL))
    elif traj.regime == "overdamped":
        if numeric:
            out.append(_verdict("overdamped_oracle_deviation", np.nanmax(dev), OVERDAMPED_ORACLE_TOL))
        if p0.r != 0:
            tol = INVARIANT_TOL_NUMERIC if numeric else INVARIANT_TOL_ANALYTIC
            out.append(_verdict("r_sigma4_invariant", np.nanmax(drift), tol))
    elif traj.regime == "classical" and numeric:
        out.append(_verdict("classical_oracle_deviation", np.nanmax(dev), CLASSICAL_ORACLE_TOL))
    elif traj.regime == "friction" and sc.initial.dim == 2:
        ds, dr = _pair_limit_deviation(traj, p0)
        if math.isfinite(ds):
            out.append(_verdict("strong_friction_limit", max(ds, dr), FRICTION_LIMIT_TOL))
    return out


def _madelung_diagnostics(state: GaussianState, c, seed: int, n_mc: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    scale = np.sqrt(np.diag(state.sigma.entries))
    xs = rng.standard_normal((100, state.dim)) * scale
    fick = madelung.fick_relative_residual(state, xs)
    target = (c.hbar / (2 * c.mass)) ** 2 * np.eye(state.dim)
    closed = madelung.universal_integral(state, c)
    mc = madelung.mc_universal_integral(state, c, n=n_mc, seed=seed)
    out = dict(
        fick_max_relative_residual=float(np.max(np.where(np.isfinite(fick), fick, 0.0))),
        universal_integral_closed_max_error=float(np.max(np.abs(closed - target))),
        universal_integral_mc_max_z=float(np.max(np.abs(mc.mean - target) / mc.stderr)),
        mc_samples=n_mc,
    )
    if state.dim == 2:
        fm = madelung.mc_fourth_moment(state, n=n_mc, seed=seed)
        exact = madelung.fourth_moment_check(state)
        out["fourth_moment_closed"] = exact
        out["fourth_moment_mc"] = float(fm.mean)
        out["fourth_moment_mc_stderr"] = float(fm.stderr)
    return out


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return dict(qentangle=pkg, numpy=np.__version__, scipy=scipy.__version__,
                python=platform.python_version())


def run_scenario(sc: Scenario, seed: int = 0) -> RunResult:
    """Execute one scenario in memory; see :func:`run` for the file-writing form."""
    traj = simulate(sc)
    c = sc.consts
    p0 = sc.pair0
    n = traj.times.size
    obs = traj.observables

    oracle_dev = np.full(n, np.nan)
    if _has_exact_oracle(sc, traj):
        refs = oracle_covariances(traj, sc.initial)
        oracle_dev = covariance_deviation(traj.sigma, refs)

    drift = np.full(n, np.nan)
    monitor = None
    if traj.regime != "vacuum" or _has_exact_oracle(sc, traj):
        monitor = monitor_invariants(traj)
        drift = monitor.drift

    series = dict(t=traj.times, sigma2=obs["sigma2"], r=obs["r"], r_sigma4=obs["r_sigma4"],
                  energy=obs["energy"], invariant_drift=drift, oracle_deviation=oracle_dev)
    scales = _timescales(p0, c)
    cond = traj.stats.get("max_condition_number", math.nan)
    meta = dict(
        schema_version=SCHEMA_VERSION,
        scenario_id=sc.id,
        regime=sc.regime,
        trajectory_regime=traj.regime,
        mode=sc.mode,
        consts=dict(hbar=c.hbar, mass=c.mass, gamma=c.gamma, kbt=c.kbt),
        initial_pair=dict(sigma2=p0.sigma2, r=p0.r),
        dim=sc.initial.dim,
        timescales=scales,
        solver=dict(traj.stats, rel_tol=sc.solver.rel_tol, abs_tol=sc.solver.abs_tol),
        max_ode_residual=float(np.nanmax(obs["ode_residual"])) if np.any(np.isfinite(obs["ode_residual"])) else None,
        invariant=None if monitor is None else dict(quantity=monitor.quantity, conserved=monitor.conserved,
                                                    max_drift=monitor.max_drift),
        warnings=[f"condition number {cond:.3g} exceeds {COND_WARN:.0e}"] if cond > COND_WARN else [],
        seed=seed,
        versions=_versions(),
    )
    if traj.regime == "friction" and sc.initial.dim == 2:
        ds, dr = _pair_limit_deviation(traj, p0)
        meta["limit_deviation"] = dict(sigma2=ds, r=dr)
    if "madelung" in sc.outputs:
        meta["madelung"] = _madelung_diagnostics(traj.states[-1], c, seed, sc.mc_samples)
    meta["verdicts"] = _verdicts(sc, traj, series, p0, scales)
    return RunResult(scenario_id=sc.id, regime=sc.regime, series=series, meta=meta, trajectory=traj)


# -- file output ------------------------------------------------------------------

def format_csv(series: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    cols = [np.asarray(series[name], dtype=float) for name in COLUMNS]
    for row in zip(*cols):
        writer.writerow(["nan" if math.isnan(v) else f"{v:.17g}" for v in row])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_result(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    meta = dict(result.meta, created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    csv_text = format_csv(result.series)
    json_text = json.dumps(_clean(meta), indent=2, sort_keys=True) + "\n"
    _atomic_write(out / "series.csv", csv_text)
    _atomic_write(out / "summary.json", json_text)


def run(scenario_path, out_dir=None, seed: int = 0) -> RunResult:
    """Load, execute and (optionally) write one scenario file."""
    sc = load_scenario(scenario_path)
    result = run_scenario(sc, seed=seed)
    if out_dir is not None:
        write_result(result, out_dir)
    return result


# -- sweep ------------------------------------------------------------------------

def _sweep_point(args) -> dict:
    run_id, doc, params, out_dir, seed = args
    entry = dict(run_id=run_id, params=params, dir=run_id, status="ok", error=None)
    try:
        sc = scenario_from_dict(doc)
        result = run_scenario(sc, seed=seed)
        write_result(result, Path(out_dir) / run_id)
        entry["passed"] = all(v["passed"] for v in result.meta["verdicts"])
    except (ScenarioError, ScenarioParseError) as exc:
        entry.update(status="invalid", error=str(exc))
    except SolverError as exc:
        entry.update(status="solver_failure", error=str(exc))
    except Exception as exc:  # one bad point must not abort the sweep
        entry.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return entry


def sweep(scenario_path, params: dict[str, list[float]], out_dir, workers: int = 1, seed: int = 0) -> dict:
    """Run the Cartesian product of ``params`` over a base scenario.

    Each grid point gets its own directory ``run_###`` (numbered in product
    order, independent of execution order). ``index.json`` is written once
    all points have finished and records failures without aborting.
    """
    if not params:
        raise ScenarioError("sweep needs at least one --param")
    for name, values in params.items():
        if not values:
            raise ScenarioError(f"sweep parameter {name!r} has an empty value list")
    try:
        text = Path(scenario_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario: {exc}") from None
    base = parse_scenario_text(text)
    scenario_from_dict(base)  # the unswept base must validate too
    names = list(params)
    base_id = str(base.get("id", "scenario"))
    jobs = []
    for i, combo in enumerate(itertools.product(*(params[n] for n in names))):
        doc = base
        for name, value in zip(names, combo):
            doc = set_path(doc, name, value)
        run_id = f"run_{i:03d}"
        doc = dict(doc, id=f"{base_id}-{run_id}")
        jobs.append((run_id, doc, dict(zip(names, combo)), str(out_dir), seed))
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_sweep_point, jobs))
    else:
        entries = [_sweep_point(job) for job in jobs]
    index = dict(schema_version=SCHEMA_VERSION, base_scenario=_clean(base), parameters=names,
                 runs=_clean(entries))
    _atomic_write(Path(out_dir) / "index.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


# -- report -----------------------------------------------------------------------

def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ReportError(f"missing {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptResults(f"cannot read {path}: {exc}") from None


def read_series(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ReportError(f"missing {path}") from None
    if not rows or tuple(rows[0]) != COLUMNS:
        raise CorruptResults(f"{path}: unexpected header")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise CorruptResults(f"{path}: {exc}") from None
    data = data.reshape(-1, len(COLUMNS))
    return {name: data[:, i] for i, name in enumerate(COLUMNS)}


def _run_dirs(results_dir: Path) -> list[tuple[str, Path]]:
    if not results_dir.is_dir():
        raise ReportError(f"{results_dir} is not a directory")
    index_path = results_dir / "index.json"
    if index_path.exists():
        index = _load_json(index_path)
        if not isinstance(index, dict) or not isinstance(index.get("runs"), list):
            raise CorruptResults(f"{index_path}: no run list")
        runs = [(e["run_id"], results_dir / e["dir"]) for e in index["runs"] if e.get("status") == "ok"]
        if not runs:
            raise ReportError(f"{index_path} lists no successful runs")
        return runs
    if (results_dir / "summary.json").exists():
        return [(results_dir.name, results_dir)]
    raise ReportError(f"{results_dir} has neither index.json nor summary.json")


def _zero_crossing(t: np.ndarray, r: np.ndarray, r0: float) -> tuple[float, float] | None:
    signs = r * r0
    hits = np.nonzero(signs <= 0)[0]
    hits = hits[hits > 0]
    if not hits.size:
        return None
    k = hits[0]
    if r[k] == 0:
        return float(t[k]), float(t[k] - t[k - 1])
    # linear interpolation between the bracketing samples
    t_cross = t[k - 1] + (t[k] - t[k - 1]) * r[k - 1] / (r[k - 1] - r[k])
    return float(t_cross), float(t[k] - t[k - 1])


def report(results_dir) -> dict:
    """Aggregate verdicts and write ``report.json`` and ``curves.csv``.

    ``curves.csv`` is long-format: one row per (run, time) with the
    dimensionless time ``u`` (``t/tau1`` for vacuum, ``t/tau2`` for
    overdamped runs), the ratios ``sigma2/sigma0^2`` and ``r/r0`` and their
    reference curves.
    """
    results_dir = Path(results_dir)
    runs = _run_dirs(results_dir)
    verdicts = []
    curves = []
    friction = []
    for run_id, path in runs:
        meta = _load_json(path / "summary.json")
        series = read_series(path / "series.csv")
        for v in meta.get("verdicts", []):
            verdicts.append(dict(v, run_id=run_id))
        p0 = meta["initial_pair"]
        s0, r0 = p0["sigma2"], p0["r"]
        scales = meta["timescales"]
        t = series["t"]
        regime = meta.get("trajectory_regime", meta["regime"])
        if regime == "vacuum" and meta["dim"] == 2 and r0 != 0:
            u = t / scales["tau1"]
            s_ratio, r_ratio = series["sigma2"] / s0, series["r"] / r0
            s_ref, r_ref = 1 + u**2, (1 - u**2) / (1 + u**2)
            curves += [(run_id, "vacuum", r0, "tau1", *row) for row in zip(u, s_ratio, r_ratio, s_ref, r_ref)]
            dev = max(np.max(np.abs(s_ratio - s_ref)), np.max(np.abs(r_ratio - r_ref)))
            verdicts.append(dict(_verdict("vacuum_collapse", dev, COLLAPSE_TOL), run_id=run_id))
            crossing = _zero_crossing(t, series["r"], r0)
            if crossing is not None:
                t_cross, spacing = crossing
                verdicts.append(dict(_verdict("tau1_zero_crossing", abs(t_cross - scales["tau1"]), spacing),
                                     run_id=run_id, measured=t_cross, expected=scales["tau1"]))
        elif regime == "overdamped" and meta["dim"] == 2 and r0 != 0:
            u = t / scales["tau2"]
            s_ratio, r_ratio = series["sigma2"] / s0, series["r"] / r0
            s_ref, r_ref = np.sqrt(1 + u), 1 / (1 + u)
            curves += [(run_id, "overdamped", r0, "tau2", *row) for row in zip(u, s_ratio, r_ratio, s_ref, r_ref)]
            if abs(r0) <= WEAK_CORRELATION_R0:
                dev = float(np.max(np.abs(r_ratio - r_ref) / r_ref))
                verdicts.append(dict(_verdict("weak_correlation_collapse", dev, WEAK_CORRELATION_TOL),
                                     run_id=run_id))
        elif regime == "friction" and meta.get("limit_deviation"):
            ld = meta["limit_deviation"]
            friction.append((meta["consts"]["gamma"], max(ld["sigma2"], ld["r"]), run_id))
    if len(friction) >= 2:
        friction.sort()
        devs = [d for _, d, _ in friction]
        mono = all(b < a for a, b in zip(devs, devs[1:]))
        verdicts.append(dict(name="friction_limit_monotone", value=None, threshold=None, passed=mono,
                             gammas=[g for g, _, _ in friction], deviations=devs))
    summary = dict(
        schema_version=SCHEMA_VERSION,
        n_runs=len(runs),
        verdicts=verdicts,
        passed=all(v["passed"] for v in verdicts),
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", "regime", "r0", "scale", "u", "sigma2_ratio", "r_ratio",
                     "sigma2_ratio_ref", "r_ratio_ref"])
    for row in curves:
        writer.writerow(list(row[:4]) + [f"{v:.17g}" for v in row[4:]])
    _atomic_write(results_dir / "curves.csv", buf.getvalue())
    _atomic_write(results_dir / "report.json", json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    return summary
