import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from qentangle import cli, runner
from qentangle.runner import COLUMNS, read_series

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


VACUUM = """
schema_version: 1
id: vac
regime: vacuum
consts: {hbar: 1.0, mass: 1.0}
initial: {pair: {sigma2: 1.0, r: 0.5}}
time_grid: {t_end: 4, n_steps: 40, units: tau1}
"""


class TestRun:
    def test_vacuum_pair(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", str(SCENARIOS / "vacuum_pair.yaml"), "--out", str(out)]) == 0
        s = read_series(out / "series.csv")
        assert list(s) == list(COLUMNS)
        k = int(np.argmin(np.abs(s["t"] - math.sqrt(3))))
        assert abs(s["r"][k]) <= 1e-6
        assert abs(s["sigma2"][k] - 2) <= 1e-6
        meta = json.loads((out / "summary.json").read_text())
        assert meta["schema_version"] == 1 and meta["regime"] == "vacuum"
        assert meta["solver"]["steps"] > 0 and "rejected" in meta["solver"]
        assert "numpy" in meta["versions"] and meta["seed"] == 0
        assert all(v["passed"] for v in meta["verdicts"])

    def test_overdamped_invariant_column(self, tmp_path):
        res = runner.run(SCENARIOS / "overdamped_pair.yaml")
        rs4 = res.series["r_sigma4"]
        assert np.max(np.abs(rs4 / rs4[0] - 1)) <= 1e-10
        assert np.nanmax(res.series["oracle_deviation"]) <= 1e-8

    def test_columns_equal_length(self):
        res = runner.run(SCENARIOS / "thermo_pair.yaml")
        lengths = {len(v) for v in res.series.values()}
        assert len(lengths) == 1
        assert np.all(np.isnan(res.series["oracle_deviation"]))
        assert "madelung" in res.meta

    def test_oracle_present_when_exact(self):
        for name in ("vacuum_pair.yaml", "overdamped_pair.yaml", "classical_pair.yaml"):
            res = runner.run(SCENARIOS / name)
            assert np.all(np.isfinite(res.series["oracle_deviation"])), name

    def test_flag_after_or_before_verb(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["--out", str(a), "run", str(SCENARIOS / "vacuum_pair_analytic.yaml")]) == 0
        assert cli.main(["run", str(SCENARIOS / "vacuum_pair_analytic.yaml"), "--out", str(b)]) == 0
        assert (a / "series.csv").read_bytes() == (b / "series.csv").read_bytes()

    def test_deterministic_bytes(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["run", str(SCENARIOS / "thermo_pair.yaml"), "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a/series.csv").read_bytes() == (tmp_path / "b/series.csv").read_bytes()
        ma = json.loads((tmp_path / "a/summary.json").read_text())
        mb = json.loads((tmp_path / "b/summary.json").read_text())
        ma.pop("created"), mb.pop("created")
        assert ma == mb

    def test_csv_round_trip(self, tmp_path):
        res = runner.run(SCENARIOS / "vacuum_pair.yaml", out_dir=tmp_path)
        back = read_series(tmp_path / "series.csv")
        for col in COLUMNS:
            np.testing.assert_array_equal(back[col], res.series[col])

    def test_env_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QENTANGLE_OUT", str(tmp_path / "env"))
        monkeypatch.setenv("QENTANGLE_SEED", "7")
        assert cli.main(["run", str(SCENARIOS / "thermo_pair.yaml")]) == 0
        meta = json.loads((tmp_path / "env/summary.json").read_text())
        assert meta["seed"] == 7
        assert cli.main(["run", str(SCENARIOS / "thermo_pair.yaml"), "--out", str(tmp_path / "flag"),
                         "--seed", "3"]) == 0
        assert json.loads((tmp_path / "flag/summary.json").read_text())["seed"] == 3


class TestExitCodes:
    def test_empty_grid(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM.replace("{t_end: 4, n_steps: 40, units: tau1}", "{times: []}"))
        assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 3
        assert not (tmp_path / "o" / "series.csv").exists()

    def test_bad_yaml(self, tmp_path):
        p = write(tmp_path, "s.yaml", "regime: [vacuum\n")
        assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2

    def test_validation(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM.replace("mass: 1.0", "mass: -1.0"))
        assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_solver_failure(self, tmp_path):
        text = VACUUM.replace("regime: vacuum", "regime: friction").replace(
            "mass: 1.0}", "mass: 1.0, gamma: 1.0e8}") + "solver: {min_step: 1.0e-4, max_step: 1.0}\n"
        p = write(tmp_path, "s.yaml", text)
        assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 4
        assert not (tmp_path / "o" / "series.csv").exists()

    def test_empty_sweep_list(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM)
        assert cli.main(["sweep", str(p), "--param", "r0=", "--out", str(tmp_path / "o")]) == 3

    def test_sweep_without_param(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM)
        assert cli.main(["sweep", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_report_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["report", str(tmp_path / "empty")]) == 3

    def test_report_corrupt_index(self, tmp_path):
        d = tmp_path / "bad"
        d.mkdir()
        (d / "index.json").write_text("{not json")
        assert cli.main(["report", str(d)]) == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "qentangle", "run", str(tmp_path / "x.yaml"),
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 2


class TestSweep:
    def test_r0_sweep_and_report(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM)
        out = tmp_path / "sweep"
        assert cli.main(["sweep", str(p), "--param", "r0=0.2,0.5,0.8", "--out", str(out)]) == 0
        index = json.loads((out / "index.json").read_text())
        assert [e["params"]["r0"] for e in index["runs"]] == [0.2, 0.5, 0.8]
        assert all((out / e["dir"] / "series.csv").exists() for e in index["runs"])
        assert cli.main(["report", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        crossings = [v for v in rep["verdicts"] if v["name"] == "tau1_zero_crossing"]
        assert len(crossings) == 3 and all(v["passed"] for v in crossings)
        for v, r0 in zip(crossings, (0.2, 0.5, 0.8)):
            assert v["expected"] == pytest.approx(2 * math.sqrt(1 - r0**2), rel=1e-12)
        collapse = [v for v in rep["verdicts"] if v["name"] == "vacuum_collapse"]
        assert all(v["passed"] and v["value"] <= 1e-6 for v in collapse)
        header = (out / "curves.csv").read_text().splitlines()[0]
        assert header.startswith("run_id,regime,r0,scale,u,sigma2_ratio,r_ratio")

    def test_parallel_matches_serial(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM)
        runner.sweep(p, {"r0": [0.1, 0.4, 0.7], "sigma2": [1.0, 2.0]}, tmp_path / "serial")
        runner.sweep(p, {"r0": [0.1, 0.4, 0.7], "sigma2": [1.0, 2.0]}, tmp_path / "par", workers=3)
        for i in range(6):
            a = (tmp_path / f"serial/run_{i:03d}/series.csv").read_bytes()
            b = (tmp_path / f"par/run_{i:03d}/series.csv").read_bytes()
            assert a == b
        assert (tmp_path / "serial/index.json").read_bytes() == (tmp_path / "par/index.json").read_bytes()

    def test_failure_does_not_abort(self, tmp_path):
        p = write(tmp_path, "s.yaml", VACUUM)
        out = tmp_path / "o"
        code = cli.main(["sweep", str(p), "--param", "r0=0.5,1.5", "--out", str(out)])
        assert code == 3
        index = json.loads((out / "index.json").read_text())
        assert [e["status"] for e in index["runs"]] == ["ok", "invalid"]
        assert (out / "run_000/series.csv").exists() and not (out / "run_001").exists()

    @pytest.mark.slow
    def test_gamma_sweep_monotone(self, tmp_path):
        out = tmp_path / "g"
        tau1 = math.sqrt(3)
        values = ",".join(str(g / tau1) for g in (1e2, 1e3, 1e4))
        assert cli.main(["sweep", str(SCENARIOS / "friction_pair.yaml"), "--param", f"gamma={values}",
                         "--out", str(out), "--workers", "3"]) == 0
        rep = runner.report(out)
        mono = [v for v in rep["verdicts"] if v["name"] == "friction_limit_monotone"]
        assert len(mono) == 1 and mono[0]["passed"]
        assert mono[0]["deviations"][1] <= 0.01

    def test_weak_correlation_report(self, tmp_path):
        res = runner.run(SCENARIOS / "overdamped_weak.yaml", out_dir=tmp_path)
        assert res.regime == "overdamped"
        rep = runner.report(tmp_path)
        weak = [v for v in rep["verdicts"] if v["name"] == "weak_correlation_collapse"]
        assert len(weak) == 1 and weak[0]["passed"]


def test_atomic_write_leaves_no_partial(tmp_path, monkeypatch):
    target = tmp_path / "f.csv"
    target.write_text("old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(runner.os, "replace", boom)
    with pytest.raises(OSError):
        runner._atomic_write(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["f.csv"]
