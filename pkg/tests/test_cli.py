import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gradflow import cli, config
from gradflow.config import ConfigError
from gradflow.energy import EnergyHandle

MINIMAL = """\
run_id: minimal
energy: quadratic
initial: constant(1)
tau: 1e-3
t_end: 5
"""


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def main(tmp_path, *args):
    return cli.main(["--output-dir", str(tmp_path / "out"), *args])


class TestRun:
    def test_minimal(self, tmp_path, capsys):
        spec = write(tmp_path, MINIMAL)
        assert main(tmp_path, "run", str(spec)) == 0
        root = tmp_path / "out" / "minimal"
        lines = (root / "traj.csv").read_text().splitlines()
        assert len(lines) == 5002  # header plus states 0..5000
        report = json.loads((root / "report.json").read_text())
        assert report["kl"]["theta"] == pytest.approx(0.5, abs=0.02)
        assert report["run"]["steps"] == 5000
        assert report["run"]["exact_error"] < 1e-2
        assert "theta=" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        spec = write(tmp_path, "run_id: r\nenergy: tv1d(32)\ninitial: random(7, 0.5)\n"
                               "flow: {tau: 1.0e-2, t_end: 0.5}\n")
        assert main(tmp_path, "run", str(spec)) == 0
        first = (tmp_path / "out" / "r" / "traj.csv").read_bytes()
        state = (tmp_path / "out" / "r" / "state_0.csv").read_bytes()
        assert main(tmp_path, "run", str(spec)) == 0
        assert (tmp_path / "out" / "r" / "traj.csv").read_bytes() == first
        assert (tmp_path / "out" / "r" / "state_0.csv").read_bytes() == state

    def test_seed_override_changes_data(self, tmp_path):
        spec = write(tmp_path, "run_id: r\nenergy: quadratic(9)\ninitial: random(1)\n"
                               "seed: 1\nflow: {tau: 0.1, t_end: 1.0}\n")
        assert main(tmp_path, "run", str(spec)) == 0
        a = (tmp_path / "out" / "r" / "state_0.csv").read_text()
        assert main(tmp_path, "--seed-override", "2", "run", str(spec)) == 0
        b = (tmp_path / "out" / "r" / "state_0.csv").read_text()
        assert a != b
        man = json.loads((tmp_path / "out" / "r" / "manifest.json").read_text())
        assert man["seed"] == 2 and man["prng"] == "numpy.random.PCG64"

    def test_manifest_fills_defaults(self, tmp_path):
        spec = write(tmp_path, MINIMAL)
        main(tmp_path, "run", str(spec))
        man = json.loads((tmp_path / "out" / "minimal" / "manifest.json").read_text())
        s = man["spec"]
        assert set(config.FLOW_DEFAULTS) <= set(s["flow"])
        assert set(config.ANALYSIS_DEFAULTS) <= set(s["analysis"])
        assert s["flow"]["record_every"] == 1
        assert s["energy"]["name"] == "quadratic"
        assert s["initial"] == {"kind": "constant", "value": 1.0}
        assert {"toolkit", "version", "numpy", "python", "seed"} <= set(man)

    def test_step_bound_is_config_error(self, tmp_path, capsys):
        spec = write(tmp_path, "energy: semilinear(33)\ninitial: ramp\ntau: 0.1\nt_end: 1\n")
        assert main(tmp_path, "run", str(spec)) == 2
        err = capsys.readouterr().err
        assert "1/(2 omega)" in err and "flow.tau" in err

    @pytest.mark.parametrize("text,field", [
        ("energy: nosuch\ninitial: ramp\ntau: 0.1\nt_end: 1\n", "energy"),
        ("energy: quadratic\ninitial: spiral\ntau: 0.1\nt_end: 1\n", "initial"),
        ("energy: quadratic\ninitial: ramp\ntau: -1\nt_end: 1\n", "flow.tau"),
        ("energy: quadratic\ninitial: ramp\nt_end: 1\n", "flow.tau"),
        ("run_id: a/b\nenergy: quadratic\ninitial: ramp\ntau: 0.1\nt_end: 1\n", "run_id"),
        ("energy: quadratic\ninitial: ramp\ntau: 0.1\nt_end: 1\nanalysis: {omega: 3}\n",
         "analysis.omega"),
        ("energy: constrained(quadratic, box=[0,1])\ninitial: constant(2)\ntau: 0.1\n"
         "t_end: 1\n", "initial"),
    ])
    def test_field_diagnostics(self, tmp_path, capsys, text, field):
        assert main(tmp_path, "run", str(write(tmp_path, text))) == 2
        assert field in capsys.readouterr().err

    def test_yaml_error_names_line(self, tmp_path, capsys):
        spec = write(tmp_path, "energy: quadratic\ninitial: [ramp\ntau: 0.1\n")
        assert main(tmp_path, "run", str(spec)) == 2
        assert "line" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(tmp_path, "run", str(tmp_path / "absent.yaml")) == 2

    def test_runtime_failure_keeps_partial(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        original = config.RunSpec.build_energy

        def flaky(self):
            g = original(self)

            def prox(v, lam):
                calls["n"] += 1
                if calls["n"] > 4:
                    raise FloatingPointError("solver breakdown")
                return g.prox_fn(v, lam)
            return EnergyHandle(g.name, g.grid, g.value_fn, prox)

        monkeypatch.setattr(config.RunSpec, "build_energy", flaky)
        spec = write(tmp_path, "run_id: f\nenergy: quadratic(9)\ninitial: ramp\n"
                               "flow: {tau: 0.1, t_end: 1.0, certify: false, slopes: false}\n")
        assert main(tmp_path, "run", str(spec)) == 1
        root = tmp_path / "out" / "f"
        assert "solver breakdown" in (root / "error.log").read_text()
        assert len((root / "traj.csv").read_text().splitlines()) == 1 + 5
        assert (root / "manifest.json").exists() and not (root / "report.json").exists()


class TestVerify:
    def test_metric_suite(self, capsys):
        assert cli.main(["verify", "metric"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_unknown_suite(self, capsys):
        assert cli.main(["verify", "bogus"]) == 2
        assert "unknown suite" in capsys.readouterr().err

    def test_all(self, capsys):
        assert cli.main(["verify", "all"]) == 0
        last = capsys.readouterr().out.strip().splitlines()[-1]
        done, total = last.split()[0].split("/")
        assert done == total


class TestSweep:
    def read(self, path):
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))

    def test_power_theta(self, tmp_path):
        spec = write(tmp_path, "run_id: pw\nenergy: power(2)\ninitial: constant(1)\n"
                               "flow: {tau: 1.0e-2, t_end: 20}\n"
                               "analysis: {omega: false}\n")
        assert main(tmp_path, "--jobs", "2", "sweep", str(spec), "--param", "energy.p",
                    "--values", "2,3,4,6") == 0
        rows = self.read(tmp_path / "out" / "pw" / "sweep.csv")
        assert [r["value"] for r in rows] == ["2", "3", "4", "6"]
        for r in rows:
            p = int(r["value"])
            assert float(r["theta"]) == pytest.approx((p - 1) / p, abs=0.02)

    def test_tau_error_linear(self, tmp_path):
        spec = write(tmp_path, "run_id: tq\nenergy: quadratic(9)\ninitial: constant(1)\n"
                               "flow: {tau: 1.0e-2, t_end: 1, slopes: false}\n"
                               "analysis: {kl_fit: false, omega: false, length: false}\n")
        assert main(tmp_path, "sweep", str(spec), "--param", "tau",
                    "--values", "1e-2,5e-3,2.5e-3") == 0
        rows = self.read(tmp_path / "out" / "tq" / "sweep.csv")
        err = [float(r["exact_error"]) for r in rows]
        assert 1.8 <= err[0] / err[1] <= 2.2 and 1.8 <= err[1] / err[2] <= 2.2
        assert list(rows[0]) == cli.SWEEP_HEADER

    def test_empty_values(self, tmp_path):
        spec = write(tmp_path, MINIMAL)
        assert main(tmp_path, "sweep", str(spec), "--param", "tau", "--values", "") == 2

    def test_bad_value_aborts_before_launch(self, tmp_path):
        spec = write(tmp_path, "run_id: sb\nenergy: semilinear(17)\ninitial: ramp\n"
                               "tau: 0.01\nt_end: 0.1\n")
        assert main(tmp_path, "sweep", str(spec), "--param", "tau",
                    "--values", "0.01,0.2") == 2
        assert not (tmp_path / "out" / "sb").exists()


class TestConfig:
    def test_positional_and_mapping_energy(self):
        a = config.resolve({"energy": "dirichlet1d(17)", "initial": "ramp", "tau": 0.1,
                            "t_end": 1}, "o", None)
        b = config.resolve({"energy": {"name": "dirichlet1d", "n": 17}, "initial": "ramp",
                            "flow": {"tau": 0.1, "t_end": 1}}, "o", None)
        assert a.energy == b.energy

    def test_yaml_exponent_strings(self):
        spec = config.resolve({"energy": "quadratic", "initial": "ramp",
                               "flow": {"tau": "1e-3", "t_end": "5"}}, "o", None)
        assert spec.flow["tau"] == 1e-3 and spec.flow["t_end"] == 5.0

    def test_random_initial_reproducible(self):
        raw = {"energy": "quadratic(33)", "initial": "random(11, 0.1)", "tau": 0.1, "t_end": 1}
        s1, s2 = config.resolve(raw, "o", None), config.resolve(raw, "o", None)
        E = s1.build_energy()
        u1, u2 = s1.initial_state(E), s2.initial_state(E)
        assert u1.tobytes() == u2.tobytes()
        ref = 0.1 * np.random.Generator(np.random.PCG64(11)).standard_normal(33)
        assert np.array_equal(u1, ref)

    def test_set_param(self):
        raw = {"energy": "power(2)", "initial": "constant(1)", "flow": {"tau": 0.1}}
        assert config.set_param(raw, "tau", 0.2)["flow"]["tau"] == 0.2
        assert raw["flow"]["tau"] == 0.1
        spec = config.resolve({**config.set_param(raw, "energy.p", 4), "t_end": 1}, "o", None)
        assert spec.energy["p"] == 4

    def test_config_error_str(self):
        assert str(ConfigError("flow.tau", "must be positive")) == "flow.tau: must be positive"


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gradflow", "verify", "nope"],
                       capture_output=True, text=True)
    assert r.returncode == 2
