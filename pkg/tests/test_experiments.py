"""Sweep orchestration, CSV determinism, and aggregate consistency."""

import csv
import hashlib
import os

import numpy as np
import pytest

from aoi_nest.experiments import (
    ExperimentPlan,
    emit_csv,
    format_float,
    simulate_to_dir,
    summary_stats,
    sweep_scale,
)
from aoi_nest.model import GroupSpec, ScenarioConfig

from conftest import tiny_config


def small_cfg(horizon=600):
    return ScenarioConfig(
        num_users=4,
        num_servers=2,
        groups=(GroupSpec(2, 1, (0.8, 0.8)), GroupSpec(2, 2, (0.5, 0.5))),
        horizon=horizon,
        smoothing=50,
        truncation=90,
        rng_seed=77,
    )


class TestSummaryStats:
    def test_single_value_zero_stderr(self):
        mean, se = summary_stats([4.2])
        assert mean == 4.2 and se == 0.0

    def test_mean_and_stderr(self):
        mean, se = summary_stats([1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0)
        assert se == pytest.approx(1.0 / np.sqrt(3))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summary_stats([])


class TestCsv:
    def test_nine_significant_digits(self):
        assert format_float(1.23456789012345) == "1.23456789"
        assert format_float(0.5) == "0.5"

    def test_byte_identical_reruns(self, tmp_path):
        rows = [[1, format_float(3.14159)], [2, format_float(2.71828)]]
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_csv(str(p1), ["k", "v"], rows)
        emit_csv(str(p2), ["k", "v"], rows)
        assert p1.read_bytes() == p2.read_bytes()
        assert b"\r" not in p1.read_bytes()  # LF endings


class TestSimulateToDir:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = small_cfg()
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        simulate_to_dir(cfg, "nested", [0, 1], str(d1))
        simulate_to_dir(cfg, "nested", [0, 1], str(d2))
        for name in ("timeseries.csv", "timeseries_seed1.csv", "summary.csv"):
            a = (d1 / name).read_bytes()
            b = (d2 / name).read_bytes()
            assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()

    def test_aggregation_matches_timeseries_recomputation(self, tmp_path):
        """summary.csv's avg_aoi equals an independent recomputation from the
        raw per-slot series, burn-in excluded."""
        cfg = small_cfg()
        out = tmp_path / "out"
        metrics = simulate_to_dir(cfg, "nested", [0], str(out))
        with open(out / "timeseries.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == cfg.horizon
        ages = np.array([float(r["mean_age"]) for r in rows])
        burn = cfg.horizon // 10
        recomputed = float(np.float32(ages[burn:].astype(np.float32).mean()))
        assert metrics[0].avg_aoi == pytest.approx(recomputed, rel=1e-6)
        with open(out / "summary.csv") as fh:
            srows = list(csv.DictReader(fh))
        assert float(srows[0]["avg_aoi"]) == pytest.approx(metrics[0].avg_aoi, rel=1e-8)

    def test_timeseries_columns(self, tmp_path):
        cfg = small_cfg(horizon=50)
        out = tmp_path / "cols"
        simulate_to_dir(cfg, "nested", [0], str(out))
        header = open(out / "timeseries.csv").readline().strip().split(",")
        assert header == ["t", "mean_age", "nu_1", "nu_2", "completions"]


class TestSweep:
    def test_rows_and_files(self, tmp_path):
        cfg = small_cfg(horizon=400)
        plan = ExperimentPlan(
            config=cfg,
            policies=("nested", "mamp"),
            scales=(1, 2),
            seeds=2,
            out_dir=str(tmp_path / "sweep"),
        )
        rows, baselines, records = sweep_scale(plan, bound_iters=200)
        assert len(rows) == 4
        assert set(baselines) == {1, 2}
        for row in rows:
            assert row.seeds == 2 and not row.error
            assert row.mean_aoi >= baselines[row.scale] - 1e-6
        assert (tmp_path / "sweep" / "sweep.csv").exists()
        assert (tmp_path / "sweep" / "summary.csv").exists()
        with open(tmp_path / "sweep" / "summary.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 8

    def test_cell_failures_recorded_not_raised(self, tmp_path, monkeypatch):
        import aoi_nest.experiments as exp

        def boom(args):
            return {
                "policy": args[1],
                "scale": args[0].scale,
                "seed": args[2],
                "avg_aoi": float("nan"),
                "wall": 0.0,
                "error": "RuntimeError: boom",
            }

        monkeypatch.setattr(exp, "_run_cell", boom)
        monkeypatch.setenv("AOI_NEST_WORKERS", "1")
        plan = ExperimentPlan(
            config=small_cfg(horizon=100),
            policies=("nested",),
            scales=(1,),
            seeds=1,
        )
        rows, _, _ = sweep_scale(plan, bound_iters=50)
        assert rows[0].error and np.isnan(rows[0].mean_aoi)

    def test_plan_validation(self):
        cfg = small_cfg()
        with pytest.raises(ValueError):
            ExperimentPlan(cfg, (), (1,), 1)
        with pytest.raises(ValueError):
            ExperimentPlan(cfg, ("nested",), (1,), 0)
        with pytest.raises(ValueError):
            ExperimentPlan(cfg, ("nested",), (1,), 1, baseline="nope")


class TestPlots:
    def test_figures_render(self, tmp_path):
        from aoi_nest.plots import plot_dual_curve, plot_policy_bars, plot_sweep, plot_timeseries
        from aoi_nest.scheduler import run_episode

        cfg = small_cfg(horizon=300)
        m = run_episode(cfg, "nested", 0, keep_series=True)
        p1 = plot_timeseries(
            m.mean_age_series, m.nu_series, m.nu_series_stride, str(tmp_path / "ts.png")
        )
        assert os.path.getsize(p1) > 1000
        p2 = plot_dual_curve([1.0, 2.0, 2.5], str(tmp_path / "dual.png"))
        assert os.path.exists(p2)
        plan = ExperimentPlan(cfg, ("nested",), (1,), 1)
        rows, baselines, _ = sweep_scale(plan, bound_iters=100)
        p3 = plot_sweep(rows, baselines, str(tmp_path / "sweep.png"))
        assert os.path.exists(p3)
        p4 = plot_policy_bars({"nested": (8.0, 0.2)}, 7.0, str(tmp_path / "bars.png"))
        assert os.path.exists(p4)
