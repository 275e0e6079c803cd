"""Command-line interface: simulate, solve, index, bound, fluid, sweep, check.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import __version__
from .bounds import fluid_lp, relaxed_lower_bound
from .experiments import (
    ExperimentPlan,
    emit_csv,
    format_float,
    simulate_to_dir,
    sweep_scale,
)
from .index_policy import gamma_star_closed_form, index_closed_form
from .model import ModelError, UserModel, scaled
from .scenario_io import ScenarioParseError, parse_scenario
from .scheduler import (
    POLICIES,
    DualState,
    GroupGammaCache,
    SimState,
    nested_index_policy_step,
    run_episode,
)
from .solver import (
    NOOP,
    ConvergenceError,
    relative_value_iteration,
    indexability_sweep,
)
from .statespace import get_space
from .verify import (
    per_stage_cost_identity,
    verify_mltt,
    verify_value_monotonicity,
)

NUMERICAL_ERRORS = (ConvergenceError, RuntimeError, FloatingPointError)


class _Cli(click.Group):
    def main(self, *args, **kwargs):
        try:
            return super().main(*args, standalone_mode=False, **kwargs)
        except click.UsageError as exc:
            click.echo(f"usage error: {exc.format_message()}", err=True)
            sys.exit(1)
        except (ScenarioParseError, ModelError, ValueError) as exc:
            click.echo(f"usage error: {exc}", err=True)
            sys.exit(1)
        except NUMERICAL_ERRORS as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(2)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.Abort:
            sys.exit(1)


@click.group(cls=_Cli)
@click.version_option(__version__)
def main() -> None:
    """Age-minimal edge offloading: index policies, bounds, and experiments."""


def _load(scenario: str, scale: int):
    config = parse_scenario(scenario)
    if scale > 1:
        config = scaled(config, scale)
    return config


def _parse_nu(text: str | None, m: int) -> np.ndarray:
    if not text:
        return np.zeros(m)
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) == 1:
        return np.full(m, vals[0])
    if len(vals) != m:
        raise click.UsageError(f"--nu needs 1 or {m} values, got {len(vals)}")
    return np.asarray(vals)


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--policy", default="nested", type=click.Choice(POLICIES))
@click.option("--seeds", default=1, show_default=True, help="number of replications")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scale", default=1, show_default=True)
@click.option("--plots/--no-plots", default=True, show_default=True)
def simulate(scenario, policy, seeds, out_dir, scale, plots):
    """Simulate episodes; write timeseries.csv, summary.csv, and figures."""
    config = _load(scenario, scale)
    metrics = simulate_to_dir(config, policy, list(range(seeds)), out_dir)
    mean = float(np.mean([m.avg_aoi for m in metrics]))
    click.echo(f"{policy} scale={config.scale}: mean normalized age {mean:.6g}")
    if plots:
        from .plots import plot_timeseries

        m0 = metrics[0]
        plot_timeseries(
            m0.mean_age_series,
            m0.nu_series,
            m0.nu_series_stride,
            os.path.join(out_dir, "timeseries.png"),
        )
        click.echo(f"wrote {out_dir}/timeseries.png")


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--group", default=0, show_default=True, help="user group index")
@click.option("--nu", default=None, help="activating costs (1 or M values)")
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--tol", default=1e-9, show_default=True)
def solve(scenario, group, nu, out_path, tol):
    """Solve one group's decoupled MDP; optionally dump the value table."""
    config = parse_scenario(scenario)
    if not (0 <= group < len(config.groups)):
        raise click.UsageError(f"group must be in 0..{len(config.groups)-1}")
    model = UserModel.from_group(config.groups[group])
    nu_vec = _parse_nu(nu, config.num_servers)
    space = get_space(config.truncation)
    sol = relative_value_iteration(model, nu_vec, space, tol=tol)
    click.echo(
        f"group {group}: gamma*={sol.gamma_star:.9g} "
        f"(sweeps {sol.iterations}, span {sol.final_span:.2e})"
    )
    if out_path:
        rows = []
        for i in range(space.size):
            act = sol.policy[i]
            rows.append(
                [
                    1 if space.is_idle[i] else 2,
                    int(space.delta[i]),
                    int(space.gen_age[i]),
                    "noop" if act == NOOP else f"s{act+1}",
                    format_float(float(sol.values[i])),
                ]
            )
        emit_csv(out_path, ["layer", "delta", "gen_age", "action", "value"], rows)
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--nu", default=None, help="activating costs (1 or M values)")
@click.option("--warmup", default=0, show_default=True, help="nested-policy slots before the dump")
@click.option("--out", "out_path", required=True, type=click.Path())
def index(scenario, nu, warmup, out_path):
    """Dump the nested index table at the users' current states."""
    config = parse_scenario(scenario)
    nu_vec = _parse_nu(nu, config.num_servers)
    dual = DualState(nu_vec, alpha=1.0 / config.smoothing)
    cache = GroupGammaCache(config)
    states = [__import__("aoi_nest.model", fromlist=["Idle"]).Idle(1)] * config.num_users
    sim = SimState.initial(config.num_users)
    rng = np.random.default_rng(config.rng_seed)
    if warmup:
        from .scheduler import _group_index, _nested_step_arrays, _tau_by_user, step_states

        gidx = _group_index(config)
        tau = _tau_by_user(config)
        p_mat = config.p_matrix()
        for _ in range(warmup):
            actions, dual, _, _ = _nested_step_arrays(sim, dual, cache, gidx, config)
            step_states(sim, actions, p_mat, tau, config.truncation, rng.random(config.num_users))
        states = sim.to_states()
    _, _, table = nested_index_policy_step(states, dual, cache, config)
    rows = []
    for n in range(config.num_users):
        for m in range(config.num_servers):
            rows.append(
                [
                    n,
                    m + 1,
                    int(table.layer[n]),
                    int(table.delta[n]),
                    int(table.gen_age[n]),
                    format_float(float(table.values[n, m])),
                    table.method,
                ]
            )
    emit_csv(
        out_path,
        ["user", "server", "layer", "delta", "gen_age", "index", "method"],
        rows,
    )
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--iters", default=1200, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--plots/--no-plots", default=True, show_default=True)
def bound(scenario, iters, out_dir, plots):
    """Relaxed-problem lower bound by dual ascent; writes bound.csv."""
    config = parse_scenario(scenario)
    res = relaxed_lower_bound(config, ascent_iters=iters)
    os.makedirs(out_dir, exist_ok=True)
    header = [f"nu_{m+1}" for m in range(config.num_servers)] + ["bound_value", "iters"]
    emit_csv(
        os.path.join(out_dir, "bound.csv"),
        header,
        [[format_float(v) for v in res.nu_star] + [format_float(res.bound_per_user), res.iterations]],
    )
    click.echo(res.describe())
    if plots:
        from .plots import plot_dual_curve

        plot_dual_curve(res.dual_curve, os.path.join(out_dir, "bound_convergence.png"))
        click.echo(f"wrote {out_dir}/bound_convergence.png")


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--delta-max", default=None, type=int, help="override truncation for the LP")
@click.option("--top", default=20, show_default=True, help="occupancy rows per group")
@click.option("--out", "out_dir", required=True, type=click.Path())
def fluid(scenario, delta_max, top, out_dir):
    """Fluid-limit occupation LP; writes fluid.csv (objective, duals, occupancy)."""
    config = parse_scenario(scenario)
    sol = fluid_lp(config, delta_max=delta_max)
    os.makedirs(out_dir, exist_ok=True)
    rows = [["objective_per_user", format_float(sol.objective_per_user), "", ""]]
    for m, v in enumerate(sol.nu_star):
        rows.append([f"nu_{m+1}", format_float(float(v)), "", ""])
    space = sol.space
    for gi, rho in enumerate(sol.rho):
        z = rho.sum(axis=1)
        for i in np.argsort(z)[::-1][:top]:
            rows.append(
                [
                    f"group{gi}",
                    f"layer{1 if space.is_idle[i] else 2}",
                    f"delta={int(space.delta[i])},gen={int(space.gen_age[i])}",
                    format_float(float(z[i])),
                ]
            )
    emit_csv(os.path.join(out_dir, "fluid.csv"), ["key", "value", "state", "mass"], rows)
    click.echo(
        f"fluid objective per user {sol.objective_per_user:.6g}; "
        f"duals ~ {float(np.mean(sol.nu_star)):.6g}"
    )


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--policies", default="nested,rrp,mamp,marp", show_default=True)
@click.option("--scales", default="1,2,5", show_default=True)
@click.option("--seeds", default=3, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--baseline", default="lower-bound", type=click.Choice(["lower-bound", "fluid"]))
@click.option("--plots/--no-plots", default=True, show_default=True)
def sweep(scenario, policies, scales, seeds, out_dir, baseline, plots):
    """Scale sweep across policies; writes sweep.csv, summary.csv, figures."""
    config = parse_scenario(scenario)
    plan = ExperimentPlan(
        config=config,
        policies=tuple(p.strip() for p in policies.split(",") if p.strip()),
        scales=tuple(int(s) for s in scales.split(",")),
        seeds=seeds,
        out_dir=out_dir,
        baseline=baseline,
    )
    rows, baselines, _ = sweep_scale(plan, progress=lambda msg: click.echo(msg))
    for row in rows:
        click.echo(
            f"{row.policy:>18s} r={row.scale:<3d} aoi={row.mean_aoi:.4f} "
            f"+-{row.stderr:.4f} gap={row.gap_pct:.2f}%"
            + (f"  [{row.error}]" if row.error else "")
        )
    if plots:
        from .plots import plot_sweep

        plot_sweep(rows, baselines, os.path.join(out_dir, "sweep.png"))
        click.echo(f"wrote {out_dir}/sweep.png")


@main.command()
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--quick/--full", default=True, show_default=True)
def check(scenario, quick):
    """Run the structural property suites; non-zero exit on any failure."""
    config = parse_scenario(scenario)
    failures = 0

    def report(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" - {detail}" if detail else ""))
        if not ok:
            failures += 1

    space = get_space(min(config.truncation, 200 if quick else config.truncation))
    from .model import Offload, NoOp as NoOpAction, successor_distribution

    # kernel normalization on a slice of states
    from .model import Computing, Idle

    tol_bad = 0
    for n in (0, config.num_users - 1):
        model = config.user_model(n)
        for st in [Idle(1), Idle(5), Computing(9, 4), Computing(17, 9)]:
            for act in [NoOpAction()] + [Offload(m) for m in range(config.num_servers)]:
                dist = successor_distribution(st, act, config, n)
                if abs(sum(p for _, p in dist) - 1.0) > 1e-12:
                    tol_bad += 1
    report("kernel-normalization", tol_bad == 0)

    nu = np.asarray(config.initial_costs) + 1.0
    for gi, g in enumerate(config.groups if not quick else config.groups[:2]):
        model = UserModel.from_group(g)
        sol = relative_value_iteration(model, nu, space)
        report(f"group{gi}-mltt", bool(verify_mltt(sol)))
        report(f"group{gi}-value-monotonicity", bool(verify_value_monotonicity(sol)))
        report(
            f"group{gi}-stage-cost-identity",
            bool(per_stage_cost_identity(space, model, nu, 0)),
        )
        sweep_res = indexability_sweep(
            model, 0, nu, [0.0, 1.0, 5.0, 25.0, 1e6], space
        )
        report(
            f"group{gi}-indexability",
            all(sweep_res.monotone_by_layer) and all(sweep_res.reaches_full_layer),
        )
    if failures:
        raise ConvergenceError(f"{failures} property checks failed", float("nan"))
    click.echo("all checks passed")


if __name__ == "__main__":
    main()
