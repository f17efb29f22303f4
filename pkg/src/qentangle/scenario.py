"""Scenario files: a YAML document describing one simulation.

Example::

    schema_version: 1
    id: vacuum_pair
    regime: vacuum          # vacuum | friction | overdamped | thermo | classical
    mode: numeric           # numeric (integrate) | analytic (closed form)
    consts: {hbar: 1.0, mass: 1.0, gamma: 0.0, kbt: 0.0}
    initial:
      pair: {sigma2: 1.0, r: 0.5}     # or  matrix: [[1.0, 0.5], [0.5, 1.0]]
    time_grid:
      t_end: 10.0
      n_steps: 1000
      spacing: linear       # linear | log
      units: tau1           # time | tau1 | tau2 | tau3
    solver: {rel_tol: 1.0e-9, abs_tol: 1.0e-12, method: dopri5}
    outputs: [madelung]

``time_grid`` may instead be an explicit ``times: [...]`` list. Log grids
start with 0 followed by ``n_steps`` geometrically spaced points from
``t_start`` (default ``t_end * 1e-4``) to ``t_end``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import analytic
from .core import (
    CovMatrix,
    DomainError,
    NotPositiveDefinite,
    PairStats,
    PhysConsts,
    extract_pair_stats,
    pair_covariance,
    validate_spd,
)
from .dynamics import SolverConfig

SCHEMA_VERSION = 1
REGIMES = ("vacuum", "friction", "overdamped", "thermo", "classical")
ANALYTIC_REGIMES = ("vacuum", "overdamped", "classical")
OUTPUTS = ("madelung",)


class ScenarioParseError(ValueError):
    """The scenario document is not well-formed."""


class ScenarioError(ValueError):
    """The scenario document parsed but violates a validation rule."""


@dataclass(frozen=True)
class Scenario:
    consts: PhysConsts
    initial: CovMatrix
    regime: str
    time_grid: np.ndarray
    solver: SolverConfig = SolverConfig()
    outputs: tuple[str, ...] = ()
    mode: str = "numeric"
    id: str = "scenario"
    sigma_dot0: np.ndarray | None = None
    mc_samples: int = 100_000
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def pair0(self) -> PairStats:
        """Pair statistics of the leading 2x2 block (or 1x1 with r = 0)."""
        m = self.initial.entries
        if m.shape[0] == 1:
            return PairStats(float(m[0, 0]), 0.0)
        return extract_pair_stats(m[:2, :2])


def _num(value, where: str) -> float:
    # YAML 1.1 reads "1e-9" as a string
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a number, got {value!r}") from None
    return out


def _int(value, where: str) -> int:
    out = _num(value, where)
    if out != int(out):
        raise ScenarioError(f"{where}: expected an integer, got {value!r}")
    return int(out)


def _matrix(value, where: str) -> np.ndarray:
    try:
        return np.array([[_num(v, where) for v in row] for row in value], dtype=float)
    except TypeError:
        raise ScenarioError(f"{where}: expected a list of rows") from None


def _section(doc: dict, name: str, required: bool = True) -> dict:
    if name not in doc:
        if required:
            raise ScenarioError(f"missing section '{name}'")
        return {}
    sec = doc[name]
    if not isinstance(sec, dict):
        raise ScenarioError(f"section '{name}' must be a mapping")
    return sec


def _consts(sec: dict) -> PhysConsts:
    unknown = set(sec) - {"hbar", "mass", "gamma", "kbt"}
    if unknown:
        raise ScenarioError(f"consts: unknown keys {sorted(unknown)}")
    values = {k: _num(v, f"consts.{k}") for k, v in sec.items()}
    try:
        return PhysConsts(**values)
    except DomainError as exc:
        raise ScenarioError(f"consts: {exc}") from None


def _initial(sec: dict) -> tuple[CovMatrix, np.ndarray | None]:
    if ("pair" in sec) == ("matrix" in sec):
        raise ScenarioError("initial: give exactly one of 'pair' or 'matrix'")
    try:
        if "pair" in sec:
            p = sec["pair"]
            if not isinstance(p, dict) or set(p) != {"sigma2", "r"}:
                raise ScenarioError("initial.pair needs exactly the keys sigma2 and r")
            cov = pair_covariance(PairStats(_num(p["sigma2"], "initial.pair.sigma2"),
                                            _num(p["r"], "initial.pair.r")))
        else:
            cov = validate_spd(_matrix(sec["matrix"], "initial.matrix"))
    except (DomainError, NotPositiveDefinite, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"initial: {exc}") from None
    sdot = None
    if "sigma_dot" in sec:
        sdot = _matrix(sec["sigma_dot"], "initial.sigma_dot")
        if sdot.shape != cov.entries.shape:
            raise ScenarioError("initial.sigma_dot must match the covariance shape")
    return cov, sdot


def _timescale(units: str, pair: PairStats, c: PhysConsts) -> float:
    try:
        if units == "time":
            return 1.0
        if units == "tau1":
            return analytic.tau1(pair, c)
        if units == "tau2":
            return analytic.tau2(pair, c)
        if units == "tau3":
            return analytic.tau3(pair, c)
    except DomainError as exc:
        raise ScenarioError(f"time_grid.units={units}: {exc}") from None
    raise ScenarioError(f"time_grid.units must be time, tau1, tau2 or tau3, got {units!r}")


def build_time_grid(sec: dict, pair: PairStats, c: PhysConsts) -> np.ndarray:
    scale = _timescale(sec.get("units", "time"), pair, c)
    if "times" in sec:
        times = sec["times"]
        if not isinstance(times, list) or not times:
            raise ScenarioError("time_grid.times must be a non-empty list")
        grid = np.array([_num(t, "time_grid.times") for t in times]) * scale
    else:
        for key in ("t_end", "n_steps"):
            if key not in sec:
                raise ScenarioError(f"time_grid: missing '{key}'")
        t_end = _num(sec["t_end"], "time_grid.t_end") * scale
        n = _int(sec["n_steps"], "time_grid.n_steps")
        if n < 1 or not t_end > 0:
            raise ScenarioError("time_grid: need n_steps >= 1 and t_end > 0")
        spacing = sec.get("spacing", "linear")
        if spacing == "linear":
            grid = np.linspace(0.0, t_end, n + 1)
        elif spacing == "log":
            t_start = _num(sec.get("t_start", t_end / scale * 1e-4), "time_grid.t_start") * scale
            if not 0 < t_start < t_end:
                raise ScenarioError("time_grid: need 0 < t_start < t_end for log spacing")
            grid = np.concatenate([[0.0], np.geomspace(t_start, t_end, n)])
        else:
            raise ScenarioError(f"time_grid.spacing must be linear or log, got {spacing!r}")
    if grid.size == 0:
        raise ScenarioError("time grid is empty")
    if not np.all(np.isfinite(grid)) or grid[0] != 0:
        raise ScenarioError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ScenarioError("time grid must be strictly increasing")
    return grid


def _solver(sec: dict) -> SolverConfig:
    allowed = {"rel_tol", "abs_tol", "max_step", "min_step", "method", "rk4_step",
               "spd_check_every_step", "max_steps"}
    unknown = set(sec) - allowed
    if unknown:
        raise ScenarioError(f"solver: unknown keys {sorted(unknown)}")
    kw = {}
    for key, value in sec.items():
        if key == "method":
            kw[key] = str(value)
        elif key == "spd_check_every_step":
            kw[key] = bool(value)
        elif key == "max_steps":
            kw[key] = _int(value, "solver.max_steps")
        else:
            kw[key] = _num(value, f"solver.{key}")
    try:
        return SolverConfig(**kw)
    except ValueError as exc:
        raise ScenarioError(f"solver: {exc}") from None


def _check_regime(regime: str, mode: str, c: PhysConsts) -> None:
    if regime not in REGIMES:
        raise ScenarioError(f"regime must be one of {REGIMES}, got {regime!r}")
    if mode not in ("numeric", "analytic"):
        raise ScenarioError(f"mode must be numeric or analytic, got {mode!r}")
    if mode == "analytic" and regime not in ANALYTIC_REGIMES:
        raise ScenarioError(f"regime {regime} has no closed form; use mode: numeric")
    if regime == "vacuum" and c.gamma != 0:
        raise ScenarioError("vacuum regime needs gamma = 0")
    if regime in ("friction", "overdamped", "thermo", "classical") and not c.gamma > 0:
        raise ScenarioError(f"regime {regime} needs gamma > 0")
    if regime == "overdamped" and c.kbt != 0:
        raise ScenarioError("overdamped regime is the kbt = 0 limit; use thermo for kbt > 0")
    if regime == "classical" and not c.kbt > 0:
        raise ScenarioError("classical regime needs kbt > 0")


def scenario_from_dict(doc) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario document must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {"schema_version", "id", "regime", "mode", "consts", "initial", "time_grid",
             "solver", "outputs", "mc_samples"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"unknown top-level keys {sorted(unknown)}")
    c = _consts(_section(doc, "consts"))
    regime = doc.get("regime")
    mode = doc.get("mode", "numeric")
    _check_regime(regime, mode, c)
    cov, sdot = _initial(_section(doc, "initial"))
    if sdot is not None and regime not in ("vacuum", "friction"):
        raise ScenarioError("initial.sigma_dot only applies to the vacuum and friction regimes")
    if sdot is not None and mode == "analytic":
        raise ScenarioError("closed forms assume sigma_dot = 0")
    pair = (PairStats(float(cov.entries[0, 0]), 0.0) if cov.dim == 1
            else extract_pair_stats(cov.entries[:2, :2]))
    grid = build_time_grid(_section(doc, "time_grid"), pair, c)
    outputs = doc.get("outputs") or []
    if not isinstance(outputs, list) or any(o not in OUTPUTS for o in outputs):
        raise ScenarioError(f"outputs must be a list drawn from {OUTPUTS}")
    mc = _int(doc.get("mc_samples", 100_000), "mc_samples")
    if mc < 2:
        raise ScenarioError("mc_samples must be >= 2")
    return Scenario(
        consts=c,
        initial=cov,
        regime=regime,
        time_grid=grid,
        solver=_solver(_section(doc, "solver", required=False)),
        outputs=tuple(outputs),
        mode=mode,
        id=str(doc.get("id", "scenario")),
        sigma_dot0=sdot,
        mc_samples=mc,
        raw=copy.deepcopy(doc),
    )


def parse_scenario_text(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario document must be a mapping")
    return doc


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario: {exc}") from None
    return scenario_from_dict(parse_scenario_text(text))


PARAM_ALIASES = {
    "r0": "initial.pair.r",
    "sigma2": "initial.pair.sigma2",
    "hbar": "consts.hbar",
    "mass": "consts.mass",
    "gamma": "consts.gamma",
    "kbt": "consts.kbt",
    "t_end": "time_grid.t_end",
}


def set_path(doc: dict, path: str, value) -> dict:
    """Copy of ``doc`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(doc)
    keys = PARAM_ALIASES.get(path, path).split(".")
    node = out
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ScenarioError(f"sweep parameter {path!r}: no section {key!r}")
        node = node[key]
    node[keys[-1]] = value
    return out


def parse_value_list(text: str) -> list[float]:
    """``"0.2,0.5,0.8"``, ``"linspace(a,b,n)"`` or ``"logspace(a,b,n)"`` (base 10)."""
    text = text.strip()
    for name, fn in (("linspace", np.linspace), ("logspace", np.logspace)):
        if text.startswith(name + "(") and text.endswith(")"):
            parts = [p.strip() for p in text[len(name) + 1:-1].split(",")]
            if len(parts) != 3:
                raise ScenarioError(f"{name} needs three arguments, got {text!r}")
            a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
            if n < 1:
                raise ScenarioError(f"{name}: n must be >= 1")
            return [float(v) for v in fn(a, b, n)]
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ScenarioError("empty sweep value list")
    try:
        out = [float(v) for v in vals]
    except ValueError:
        raise ScenarioError(f"sweep values must be numbers, got {text!r}") from None
    if not all(math.isfinite(v) for v in out):
        raise ScenarioError("sweep values must be finite")
    return out
