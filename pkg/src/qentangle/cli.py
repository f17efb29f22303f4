"""Command line interface.

::

    qentangle [--out DIR] [--workers N] [--seed N] run SCENARIO
    qentangle sweep SCENARIO --param r0=0.2,0.5,0.8 [--param gamma=logspace(2,4,3)]
    qentangle report DIR

Global flags may also follow the verb. ``QENTANGLE_OUT``, ``QENTANGLE_WORKERS``
and ``QENTANGLE_SEED`` supply defaults; explicit flags win.

Exit codes: 0 success, 2 parse error, 3 validation error, 4 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .runner import CorruptResults, ReportError, report, run, sweep
from .scenario import ScenarioError, ScenarioParseError, parse_value_list
from .dynamics import SolverError

ENV_PREFIX = "QENTANGLE_"
EXIT_PARSE, EXIT_VALIDATION, EXIT_SOLVER = 2, 3, 4

log = logging.getLogger("qentangle")


def _env(name: str, default):
    return os.environ.get(ENV_PREFIX + name, default)


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel sweep workers")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Monte Carlo seed")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qentangle", parents=[common],
                                     description="Gaussian free-particle correlation simulator")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", parents=[common], help="run one scenario file")
    p_run.add_argument("scenario")
    p_sweep = sub.add_parser("sweep", parents=[common], help="sweep scenario parameters")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--param", action="append", default=[], metavar="NAME=LIST",
                         help="parameter and comma list, linspace(a,b,n) or logspace(a,b,n)")
    p_rep = sub.add_parser("report", parents=[common], help="aggregate a results directory")
    p_rep.add_argument("results")
    return parser


def _parse_params(items: list[str]) -> dict[str, list[float]]:
    params = {}
    for item in items:
        name, sep, values = item.partition("=")
        if not sep or not name.strip():
            raise ScenarioError(f"--param expects NAME=LIST, got {item!r}")
        params[name.strip()] = parse_value_list(values)
    return params


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = vars(args).get("out", _env("OUT", "results"))
    seed = int(vars(args).get("seed", _env("SEED", 0)))
    workers = int(vars(args).get("workers", _env("WORKERS", 1)))
    try:
        if args.verb == "run":
            result = run(args.scenario, out_dir=out, seed=seed)
            failed = [v["name"] for v in result.meta["verdicts"] if not v["passed"]]
            log.info("%s: %d rows -> %s%s", result.scenario_id, len(result.series["t"]), out,
                     f" (failed: {', '.join(failed)})" if failed else "")
        elif args.verb == "sweep":
            index = sweep(args.scenario, _parse_params(args.param), out, workers=workers, seed=seed)
            bad = [e for e in index["runs"] if e["status"] != "ok"]
            log.info("%d runs -> %s, %d failed", len(index["runs"]), out, len(bad))
            for e in bad:
                log.error("%s: %s: %s", e["run_id"], e["status"], e["error"])
            if bad:
                return EXIT_SOLVER if any(e["status"] == "solver_failure" for e in bad) else EXIT_VALIDATION
        else:
            summary = report(args.results)
            for v in summary["verdicts"]:
                log.info("%-4s %s %s", "PASS" if v["passed"] else "FAIL", v.get("run_id", "-"), v["name"])
    except ScenarioParseError as exc:
        log.error("parse error: %s", exc)
        return EXIT_PARSE
    except CorruptResults as exc:
        log.error("corrupt results: %s", exc)
        return EXIT_PARSE
    except (ScenarioError, ReportError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    return 0


if __name__ == "__main__":
    sys.exit(main())
