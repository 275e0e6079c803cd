"""CLI subcommands, file outputs, and exit codes."""

import os
import subprocess
import sys

import pytest

SCEN = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def run_cli(*args, **kw):
    return subprocess.run(
        [sys.executable, "-m", "aoi_nest.cli", *args],
        capture_output=True,
        text=True,
        timeout=kw.pop("timeout", 240),
        **kw,
    )


@pytest.fixture(scope="module")
def demo():
    return os.path.join(SCEN, "no_warmup_demo.scenario")


class TestExitCodes:
    def test_usage_error_is_one(self):
        out = run_cli("simulate", "--scenario", "/nonexistent", "--out", "/tmp/x")
        assert out.returncode == 1

    def test_unknown_option_is_one(self):
        out = run_cli("simulate", "--bogus")
        assert out.returncode == 1

    def test_bad_scenario_content_is_one(self, tmp_path):
        bad = tmp_path / "bad.scenario"
        bad.write_text("aoi-nest-scenario v1\nnum_users 2\n")
        out = run_cli("solve", "--scenario", str(bad))
        assert out.returncode == 1
        assert "usage error" in out.stderr

    def test_success_is_zero(self, demo):
        out = run_cli("solve", "--scenario", demo, "--nu", "1.0")
        assert out.returncode == 0, out.stderr
        assert "gamma*" in out.stdout


class TestSubcommands:
    def test_solve_dump(self, demo, tmp_path):
        out_path = tmp_path / "vals.csv"
        out = run_cli("solve", "--scenario", demo, "--nu", "1.5", "--out", str(out_path))
        assert out.returncode == 0, out.stderr
        header = out_path.read_text().splitlines()[0]
        assert header == "layer,delta,gen_age,action,value"

    def test_index_dump(self, demo, tmp_path):
        out_path = tmp_path / "index.csv"
        out = run_cli(
            "index", "--scenario", demo, "--nu", "1.0", "--warmup", "30",
            "--out", str(out_path),
        )
        assert out.returncode == 0, out.stderr
        lines = out_path.read_text().splitlines()
        assert lines[0] == "user,server,layer,delta,gen_age,index,method"
        assert len(lines) == 1 + 4 * 2  # N * M rows

    def test_simulate_outputs(self, demo, tmp_path):
        out_dir = tmp_path / "sim"
        out = run_cli(
            "simulate", "--scenario", demo, "--policy", "nested", "--seeds", "1",
            "--out", str(out_dir),
        )
        assert out.returncode == 0, out.stderr
        assert (out_dir / "timeseries.csv").exists()
        assert (out_dir / "summary.csv").exists()
        assert (out_dir / "timeseries.png").exists()

    def test_bound_outputs(self, demo, tmp_path):
        out_dir = tmp_path / "bound"
        out = run_cli("bound", "--scenario", demo, "--iters", "150", "--out", str(out_dir))
        assert out.returncode == 0, out.stderr
        header = (out_dir / "bound.csv").read_text().splitlines()[0]
        assert header == "nu_1,nu_2,bound_value,iters"
        assert (out_dir / "bound_convergence.png").exists()

    def test_fluid_outputs(self, demo, tmp_path):
        out_dir = tmp_path / "fluid"
        out = run_cli("fluid", "--scenario", demo, "--out", str(out_dir))
        assert out.returncode == 0, out.stderr
        text = (out_dir / "fluid.csv").read_text()
        assert "objective_per_user" in text and "nu_1" in text

    def test_sweep_outputs(self, demo, tmp_path):
        out_dir = tmp_path / "sweep"
        env = dict(os.environ, AOI_NEST_WORKERS="1")
        out = subprocess.run(
            [
                sys.executable, "-m", "aoi_nest.cli", "sweep",
                "--scenario", demo, "--policies", "nested,mamp",
                "--scales", "1,2", "--seeds", "1", "--out", str(out_dir),
            ],
            capture_output=True, text=True, timeout=300, env=env,
        )
        assert out.returncode == 0, out.stderr
        assert (out_dir / "sweep.csv").exists()
        assert (out_dir / "sweep.png").exists()

    def test_check_passes(self, demo):
        out = run_cli("check", "--scenario", demo)
        assert out.returncode == 0, out.stdout + out.stderr
        assert "[PASS]" in out.stdout and "[FAIL]" not in out.stdout
