"""Lower bound via dual ascent, the fluid LP, and their agreement."""

import numpy as np
import pytest

from aoi_nest.bounds import fixed_point_check, fluid_lp, relaxed_lower_bound
from aoi_nest.model import GroupSpec, ScenarioConfig
from aoi_nest.renewal import optimize_single_server
from aoi_nest.scheduler import run_episode

from conftest import tiny_config


class TestRelaxedLowerBound:
    def test_capacity_slack_gives_unconstrained_optima(self):
        # M >= N: the capacity never binds, nu* = 0, bound = free per-user optima
        cfg = tiny_config(tau=1, p=(0.7, 0.7, 0.7), num_users=2, truncation=60)
        res = relaxed_lower_bound(cfg, ascent_iters=300)
        assert np.allclose(res.nu_star, 0.0, atol=1e-9)
        free = optimize_single_server(1, 0.7, 0.0).gamma
        assert res.bound_per_user == pytest.approx(free, abs=1e-6)

    def test_bound_below_simulated_nested(self):
        cfg = tiny_config(tau=1, p=(0.6, 0.6), num_users=5, truncation=80, horizon=3000)
        res = relaxed_lower_bound(cfg, ascent_iters=500)
        m = run_episode(cfg, "nested", 0)
        assert res.bound_per_user <= m.avg_aoi + 1e-9

    def test_exact_final_never_exceeds_renewal_value(self):
        cfg = tiny_config(tau=2, p=(0.5, 0.5), num_users=4, truncation=120)
        approx = relaxed_lower_bound(cfg, ascent_iters=300, exact_final=False)
        exact = relaxed_lower_bound(cfg, ascent_iters=300, exact_final=True)
        # the certified value uses the true subproblem optimum
        assert exact.bound_per_user <= approx.bound_per_user + 1e-9

    def test_heterogeneous_groups_use_policy_tables(self):
        cfg = ScenarioConfig(
            num_users=2,
            num_servers=2,
            groups=(GroupSpec(2, 1, (0.5, 0.8)),),
            horizon=100,
            smoothing=50,
            truncation=50,
        )
        res = relaxed_lower_bound(cfg, ascent_iters=150)
        assert res.group_policies[0].policy_table is not None
        assert res.bound_per_user > 0


class TestFluidLP:
    def test_single_user_certain_service(self):
        # one user, one free server, p=1, no warm-up: age pinned at 1
        cfg = ScenarioConfig(
            num_users=1,
            num_servers=1,
            groups=(GroupSpec(1, 0, (1.0,)),),
            horizon=10,
            smoothing=50,
            truncation=25,
        )
        sol = fluid_lp(cfg)
        assert sol.objective_per_user == pytest.approx(1.0, abs=1e-8)
        assert sol.residuals["balance"] < 1e-8
        assert sol.residuals["capacity"] < 1e-8

    def test_zero_users_trivially_feasible(self):
        cfg = ScenarioConfig(
            num_users=0,
            num_servers=2,
            groups=(),
            horizon=10,
            smoothing=50,
            truncation=30,
        )
        sol = fluid_lp(cfg)
        assert sol.objective_per_user == 0.0

    def test_matches_dual_ascent_two_users_one_server(self):
        cfg = ScenarioConfig(
            num_users=2,
            num_servers=1,
            groups=(GroupSpec(1, 1, (0.8,)), GroupSpec(1, 2, (0.6,))),
            horizon=100,
            smoothing=50,
            truncation=70,
            rng_seed=1,
        )
        lp = fluid_lp(cfg)
        ascent = relaxed_lower_bound(cfg, ascent_iters=4000)
        assert lp.objective_total == pytest.approx(ascent.bound_total, abs=1e-3)

    def test_aggregated_equals_per_server(self):
        cfg = tiny_config(tau=1, p=(0.7, 0.7, 0.7), num_users=4, truncation=50)
        agg = fluid_lp(cfg, server_aggregate="always")
        per = fluid_lp(cfg, server_aggregate="never")
        assert agg.objective_per_user == pytest.approx(per.objective_per_user, abs=1e-5)
        assert float(np.mean(per.nu_star)) == pytest.approx(
            float(agg.nu_star[0]), abs=1e-4
        )

    def test_objective_lower_bounds_simulation(self):
        cfg = tiny_config(tau=1, p=(0.6, 0.6), num_users=5, truncation=80, horizon=3000)
        lp = fluid_lp(cfg)
        m = run_episode(cfg, "nested", 1)
        assert lp.objective_per_user <= m.avg_aoi + 1e-9


class TestFixedPointCheck:
    def test_small_instance_occupancy(self):
        # two users alternating on one certain server: each spends half its
        # slots at age 1 and half at age 2, exactly the fluid solution
        cfg = ScenarioConfig(
            num_users=2,
            num_servers=1,
            groups=(GroupSpec(2, 0, (1.0,)),),
            horizon=4000,
            smoothing=50,
            truncation=25,
            rng_seed=2,
        )
        m = run_episode(cfg, "nested", 0, collect_occupancy=True)
        fluid = fluid_lp(cfg)
        report = fixed_point_check(
            cfg,
            tol=float("inf"),
            sim_nu_mean=m.nu_window_mean,
            occupancy=m.occupancy,
            fluid=fluid,
        )
        assert report["occupancy_gap"] <= 0.02

    def test_gap_metric_reported(self):
        cfg = tiny_config(tau=0, p=(0.9, 0.9), num_users=3, truncation=40, horizon=1500)
        m = run_episode(cfg, "nested", 0)
        report = fixed_point_check(cfg, tol=1e9, sim_nu_mean=m.nu_window_mean)
        assert "nu_gap" in report and report["pass"]
