"""Relaxed-problem lower bound via dual ascent, and the fluid-limit LP.

Relaxing the per-server capacity to an average constraint decouples users;
for any non-negative costs the summed subproblem optima minus the capacity
term lower-bounds every feasible policy's average age. Projected subgradient
ascent searches the costs; the final bound is re-evaluated with the exact
solver so approximate search never inflates it. The fluid LP solves the same
relaxation as a linear program over per-group occupation measures, exposing
capacity duals for the fixed-point comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .model import ScenarioConfig, UserModel
from .renewal import RenewalSolution, optimize_single_server
from .solver import (
    NOOP,
    relative_value_iteration,
    stationary_distribution,
)
from .statespace import TruncatedStateSpace, get_space

__all__ = [
    "GroupPolicy",
    "BoundResult",
    "FluidSolution",
    "relaxed_lower_bound",
    "fluid_lp",
    "fixed_point_check",
]


@dataclass(frozen=True)
class GroupPolicy:
    """Relaxed-optimal behavior of one user group at converged costs."""

    threshold: int  # offload once idle age reaches this
    cutoff: int  # abandon an in-flight task at this elapsed compute time
    preferred_servers: tuple[int, ...]  # argmin-cost servers (ties spread)
    gamma: float
    usage: float  # long-run fraction of slots on a server
    policy_table: np.ndarray | None = None  # full state->action map when p varies


@dataclass
class BoundResult:
    nu_star: np.ndarray
    bound_total: float  # sum over users of gamma* minus capacity term
    bound_per_user: float
    group_policies: list[GroupPolicy]
    dual_curve: list[float]
    iterations: int
    converged: bool
    exact_final: bool

    def describe(self) -> str:
        return (
            f"bound per user {self.bound_per_user:.6f} after {self.iterations} "
            f"ascent steps (exact={self.exact_final})"
        )


def _group_models(config: ScenarioConfig) -> list[UserModel]:
    return [UserModel.from_group(g) for g in config.groups]


def _renewal_group(model: UserModel, nu: np.ndarray) -> tuple[RenewalSolution, tuple[int, ...]]:
    p = model.uniform_p
    assert p is not None
    nu_eff = float(nu.min()) if nu.size else 0.0
    # Near-ties count as preferred: ascent output is only approximately
    # symmetric even when the true optimum prices all servers equally.
    tol = 1e-9 + 1e-4 * max(nu_eff, 1.0)
    argmin = tuple(int(m) for m in np.nonzero(nu <= nu_eff + tol)[0])
    return optimize_single_server(model.tau_min, p, nu_eff), argmin


def _exact_group(
    model: UserModel, nu: np.ndarray, space: TruncatedStateSpace
) -> tuple[float, np.ndarray, np.ndarray]:
    """(gamma, per-server usage, policy) from an exact solve."""
    sol = relative_value_iteration(model, nu, space)
    pi = stationary_distribution(space, model, sol.policy)
    usage = np.zeros(model.num_servers)
    for m in range(model.num_servers):
        usage[m] = pi[sol.policy == m].sum()
    return sol.gamma_star, usage, sol.policy


def relaxed_lower_bound(
    config: ScenarioConfig,
    ascent_iters: int = 300,
    step_a: float = 1.0,
    step_b: float = 10.0,
    space: TruncatedStateSpace | None = None,
    exact_final: bool = True,
    tol: float = 1e-6,
) -> BoundResult:
    """Projected dual subgradient ascent on the per-server capacity prices.

    Uniform-success groups use exact renewal closed forms inside the ascent;
    heterogeneous groups solve their MDP each iterate. The returned bound is
    evaluated at the best iterate, with exact solves when ``exact_final`` so
    the subgradient shortcut can only loosen the bound, never inflate it.
    """
    models = _group_models(config)
    counts = config.group_user_counts().astype(np.float64)
    M = config.num_servers
    all_uniform = all(m.uniform_p is not None for m in models)
    if not all_uniform or exact_final:
        space = space or get_space(config.truncation)

    def usage_and_gamma(nu: np.ndarray, exact: bool):
        total_usage = np.zeros(M)
        gammas = np.zeros(len(models))
        policies: list[GroupPolicy] = []
        for gi, model in enumerate(models):
            if all_uniform and not exact:
                ren, argmin = _renewal_group(model, nu)
                gammas[gi] = ren.gamma
                share = counts[gi] * ren.usage / len(argmin)
                for m in argmin:
                    total_usage[m] += share
                policies.append(
                    GroupPolicy(ren.threshold, ren.cutoff, argmin, ren.gamma, ren.usage)
                )
            else:
                gamma, usage, policy = _exact_group(model, nu, space)
                gammas[gi] = gamma
                total_usage += counts[gi] * usage
                if model.uniform_p is not None:
                    # Behavioral parameters from the renewal family; the exact
                    # solve above supplies the certified value and usage.
                    ren, argmin = _renewal_group(model, nu)
                    threshold, cutoff = ren.threshold, ren.cutoff
                else:
                    idle_pol = policy[: space.num_idle]
                    active = np.nonzero(idle_pol != NOOP)[0]
                    threshold = int(active[0]) + 1 if active.size else space.delta_max
                    # On-path drops only: abandoning below the warm-up can be
                    # greedy-optimal at stale off-path states but never occurs
                    # along the policy's own trajectories.
                    dropped = (
                        (~space.is_idle)
                        & (policy == NOOP)
                        & (space.elapsed > model.tau_min)
                    )
                    cutoff = (
                        int(space.elapsed[dropped].min())
                        if dropped.any()
                        else space.delta_max
                    )
                    nu_eff = float(nu.min())
                    argmin = tuple(
                        int(m) for m in np.nonzero(np.abs(nu - nu_eff) < 1e-12)[0]
                    )
                    policies.append(
                        GroupPolicy(
                            threshold,
                            cutoff,
                            argmin,
                            gamma,
                            float(usage.sum()),
                            policy_table=policy,
                        )
                    )
                    continue
                policies.append(
                    GroupPolicy(threshold, cutoff, argmin, gamma, float(usage.sum()))
                )
        return total_usage, gammas, policies

    nu = np.asarray(config.initial_costs, dtype=np.float64).copy()
    if all_uniform and np.all(nu == 0):
        # Warm start at the symmetric price balancing total usage with
        # capacity; renewal usage is monotone in the price, so bisect.
        lo, hi = 0.0, 1.0
        def excess(v: float) -> float:
            tot = 0.0
            for gi, model in enumerate(models):
                tot += counts[gi] * optimize_single_server(
                    model.tau_min, model.uniform_p, v
                ).usage
            return tot - M
        if excess(0.0) > 0:
            while excess(hi) > 0 and hi < 1e6:
                hi *= 2.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if excess(mid) > 0:
                    lo = mid
                else:
                    hi = mid
            nu = np.full(M, 0.5 * (lo + hi))
    best_nu = nu.copy()
    best_val = -np.inf
    curve: list[float] = []
    tail: list[np.ndarray] = []
    for it in range(1, ascent_iters + 1):
        usage, gammas, _ = usage_and_gamma(nu, exact=False)
        val = float(counts @ gammas - nu.sum())
        curve.append(val)
        if val > best_val:
            best_val = val
            best_nu = nu.copy()
        step = step_a / (step_b + it)
        nu = np.maximum(0.0, nu + step * (usage - 1.0))
        if it > ascent_iters * 3 // 4:
            tail.append(nu.copy())

    candidates = [best_nu]
    if tail:
        candidates.append(np.mean(tail, axis=0))
    best = None
    for cand in candidates:
        usage, gammas, policies = usage_and_gamma(cand, exact=exact_final)
        val = float(counts @ gammas - cand.sum())
        if best is None or val > best[0]:
            best = (val, cand, policies)
    val, nu_star, policies = best
    converged = len(curve) > 20 and abs(curve[-1] - curve[-10]) <= max(
        tol, 1e-4 * abs(curve[-1])
    )
    return BoundResult(
        nu_star=nu_star,
        bound_total=val,
        bound_per_user=val / max(config.num_users, 1),
        group_policies=policies,
        dual_curve=curve,
        iterations=ascent_iters,
        converged=converged,
        exact_final=exact_final,
    )


# -- fluid LP ------------------------------------------------------------------


@dataclass
class FluidSolution:
    objective_per_user: float
    objective_total: float
    nu_star: np.ndarray  # per-server capacity duals
    rho: list[np.ndarray]  # per group: S x (A+1) occupation measure (NoOp first)
    server_aggregated: bool
    space: TruncatedStateSpace | None
    residuals: dict = field(default_factory=dict)

    def state_marginals(self, group: int) -> np.ndarray:
        return self.rho[group].sum(axis=1)


def _transition_matrix(
    space: TruncatedStateSpace, model: UserModel, action: int | None, p: float | None
) -> sp.csr_matrix:
    """P(s' | s, a) for a fixed action column (None = NoOp)."""
    S = space.size
    if action is None:
        return sp.csr_matrix(
            (np.ones(S), (np.arange(S), space.noop_next)), shape=(S, S)
        )
    t = space.offload_tables(model.tau_min)
    rows = [np.arange(S)]
    cols = [t.cont_next]
    vals = [np.where(t.eligible, 1.0 - p, 1.0)]
    el = np.nonzero(t.eligible)[0]
    rows.append(el)
    cols.append(t.done_next[el])
    vals.append(np.full(el.size, p))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(S, S),
    )


def fluid_lp(
    config: ScenarioConfig,
    delta_max: int | None = None,
    server_aggregate: str = "auto",
) -> FluidSolution:
    """Occupation-measure LP of the relaxed problem.

    Bilinear fraction products are linearized by rho = z * x exactly. When
    every group's success probability is server independent the servers are
    exchangeable and one aggregated column with capacity M is solved instead
    (exact by symmetry); per-server duals and measures follow by symmetry.
    """
    if config.num_users == 0:
        return FluidSolution(0.0, 0.0, np.zeros(config.num_servers), [], False, None)
    models = _group_models(config)
    counts = config.group_user_counts().astype(np.float64)
    space = get_space(delta_max or config.truncation)
    S = space.size
    M = config.num_servers
    all_uniform = all(m.uniform_p is not None for m in models)
    aggregate = server_aggregate == "always" or (
        server_aggregate == "auto" and all_uniform and M > 2
    )
    if aggregate and not all_uniform:
        raise ValueError("server aggregation requires server-independent probabilities")

    n_groups = len(models)
    n_actions = 2 if aggregate else M + 1
    block = S * n_actions
    n_vars = n_groups * block

    eq_rows, eq_cols, eq_vals, eq_rhs = [], [], [], []
    row0 = 0
    for gi, model in enumerate(models):
        base = gi * block
        # normalization
        eq_rows.append(np.full(block, row0))
        eq_cols.append(base + np.arange(block))
        eq_vals.append(np.ones(block))
        eq_rhs.append(1.0)
        row0 += 1
        # flow balance: sum_a rho[s,a] - sum_{s',a} rho[s',a] P(s|s',a) = 0
        actions: list[tuple[int | None, float | None]] = [(None, None)]
        if aggregate:
            actions.append((0, model.uniform_p))
        else:
            actions.extend((m, model.success_prob_per_server[m]) for m in range(M))
        for ai, (act, p) in enumerate(actions):
            cols_ai = base + ai * S + np.arange(S)
            eq_rows.append(row0 + np.arange(S))
            eq_cols.append(cols_ai)
            eq_vals.append(np.ones(S))
            P = _transition_matrix(space, model, act, p).tocoo()
            eq_rows.append(row0 + P.col)
            eq_cols.append(base + ai * S + P.row)
            eq_vals.append(-P.data)
        eq_rhs.extend([0.0] * S)
        row0 += S

    A_eq = sp.csr_matrix(
        (
            np.concatenate(eq_vals),
            (np.concatenate(eq_rows), np.concatenate(eq_cols)),
        ),
        shape=(row0, n_vars),
    )
    b_eq = np.asarray(eq_rhs)

    n_cap = 1 if aggregate else M
    ub_rows, ub_cols, ub_vals = [], [], []
    for gi in range(n_groups):
        base = gi * block
        for ai in range(1, n_actions):
            cap_row = 0 if aggregate else ai - 1
            ub_rows.append(np.full(S, cap_row))
            ub_cols.append(base + ai * S + np.arange(S))
            ub_vals.append(np.full(S, counts[gi]))
    A_ub = sp.csr_matrix(
        (
            np.concatenate(ub_vals),
            (np.concatenate(ub_rows), np.concatenate(ub_cols)),
        ),
        shape=(n_cap, n_vars),
    )
    b_ub = np.full(n_cap, float(M) if aggregate else 1.0)

    cost = np.concatenate(
        [
            np.tile(space.delta.astype(np.float64), n_actions) * counts[gi]
            for gi in range(n_groups)
        ]
    )
    res = linprog(
        cost,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(
            f"fluid LP failed (status {res.status}): {res.message}; "
            f"try a larger delta_max"
        )
    rho = []
    for gi in range(n_groups):
        blockv = res.x[gi * block : (gi + 1) * block]
        rho.append(blockv.reshape(n_actions, S).T)
    marg = -np.asarray(res.ineqlin.marginals)
    # Aggregated capacity prices one server-slot, which by exchangeability is
    # exactly each server's own dual.
    nu_star = np.full(M, float(marg[0])) if aggregate else marg
    residuals = {
        "balance": float(np.abs(A_eq @ res.x - b_eq).max()),
        "capacity": float(np.maximum(A_ub @ res.x - b_ub, 0.0).max()),
    }
    return FluidSolution(
        objective_per_user=float(res.fun) / config.num_users,
        objective_total=float(res.fun),
        nu_star=nu_star,
        rho=rho,
        server_aggregated=aggregate,
        space=space,
        residuals=residuals,
    )


def fixed_point_check(
    config: ScenarioConfig,
    tol: float,
    sim_nu_mean: np.ndarray,
    occupancy: list[np.ndarray] | None = None,
    fluid: FluidSolution | None = None,
    delta_max: int | None = None,
) -> dict:
    """Compare converged simulation duals (and occupancies) to the fluid LP.

    Returns discrepancy metrics; equality is asymptotic in the scale, so the
    caller chooses the tolerance per scale.
    """
    fluid = fluid or fluid_lp(config, delta_max=delta_max)
    nu_gap = float(np.abs(np.asarray(sim_nu_mean) - fluid.nu_star).max())
    report = {
        "nu_gap": nu_gap,
        "nu_fluid": fluid.nu_star,
        "pass": nu_gap <= tol,
    }
    if occupancy is not None:
        gaps = []
        for gi, emp in enumerate(occupancy):
            z = fluid.state_marginals(gi)
            k = min(len(emp), len(z))
            gaps.append(float(np.abs(emp[:k] - z[:k]).max()))
        report["occupancy_gap"] = max(gaps)
        report["pass"] = report["pass"] and report["occupancy_gap"] <= tol
    return report
