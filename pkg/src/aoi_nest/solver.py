"""Exact solution of one user's decoupled average-cost MDP.

The workhorse is relative value iteration over the truncated space, warm
started by Howard policy iteration (sparse unichain policy evaluation) and
certified by the span of successive Bellman differences. Greedy ties break
toward NoOp, then the lowest server index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ModelError, UserModel, UserState
from .statespace import TruncatedStateSpace

__all__ = [
    "SubproblemSolution",
    "PassiveSet",
    "SweepPoint",
    "ConvergenceError",
    "TruncationWarning",
    "relative_value_iteration",
    "action_cost_mu",
    "mu_table",
    "passive_set",
    "indexability_sweep",
    "policy_average_cost",
    "stationary_distribution",
    "extract_thresholds",
    "replay_thresholds",
]

NOOP = -1  # policy code for the do-nothing action; servers are 0-based

_IMPROVE_EPS = 1e-11


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, span: float):
        super().__init__(message)
        self.span = span


class TruncationWarning(UserWarning):
    """The solved policy only activates at the age cap; enlarge delta_max."""


@dataclass
class SubproblemSolution:
    """(gamma*, differential values, greedy policy) for one user at fixed costs."""

    user: UserModel
    nu: tuple[float, ...]
    space: TruncatedStateSpace
    gamma_star: float
    values: np.ndarray  # anchored so V[Idle(1)] == 0
    policy: np.ndarray  # int[S]; NOOP or server index
    iterations: int
    pi_iterations: int
    final_span: float
    gamma_bracket: tuple[float, float]
    converged: bool
    boundary_offload: bool
    _thresholds: dict | None = field(default=None, repr=False)

    @property
    def thresholds(self) -> dict[int, list[tuple[int, int]]]:
        if self._thresholds is None:
            self._thresholds = extract_thresholds(self.space, self.policy)
        return self._thresholds


def _distinct_p_actions(user: UserModel, nu: np.ndarray):
    """Group servers by success probability; only the cheapest matters per p."""
    groups: dict[float, list[int]] = {}
    for m, p in enumerate(user.success_prob_per_server):
        groups.setdefault(p, []).append(m)
    out = []
    for p, servers in groups.items():
        best = min(servers, key=lambda m: (nu[m], m))
        out.append((p, float(nu[best]), best))
    return out


def _bellman(
    space: TruncatedStateSpace,
    user: UserModel,
    nu: np.ndarray,
    values: np.ndarray,
):
    """One Bellman backup: returns (TV, greedy policy)."""
    delta = space.delta.astype(np.float64)
    best = delta + values[space.noop_next]
    pol = np.full(space.size, NOOP, dtype=np.int64)
    for p, cost, server in sorted(
        _distinct_p_actions(user, nu), key=lambda t: t[2]
    ):
        q = delta + cost + space.expected_values(values, user.tau_min, p)
        take = q < best - _IMPROVE_EPS
        best = np.where(take, q, best)
        pol = np.where(take, server, pol)
    return best, pol


def _greedy_policy_exact(
    space: TruncatedStateSpace, user: UserModel, nu: np.ndarray, values: np.ndarray
) -> np.ndarray:
    """Greedy policy over all servers with NoOp-then-lowest-index tie-break."""
    delta = space.delta.astype(np.float64)
    best = delta + values[space.noop_next]
    pol = np.full(space.size, NOOP, dtype=np.int64)
    for m, p in enumerate(user.success_prob_per_server):
        q = delta + nu[m] + space.expected_values(values, user.tau_min, p)
        take = q < best - _IMPROVE_EPS
        best = np.where(take, q, best)
        pol = np.where(take, m, pol)
    return pol


def band_policy(
    space: TruncatedStateSpace,
    user: UserModel,
    order: list[int],
    switch_ages: list[int],
    cutoff: int,
) -> np.ndarray:
    """Threshold policy: wait below the first switch age, then use the server
    band of the current age; abandon in-flight work at the elapsed cutoff."""
    policy = np.full(space.size, NOOP, dtype=np.int64)
    band = np.full(space.size, -1, dtype=np.int64)
    for k, age in enumerate(switch_ages):
        band[space.delta >= age] = k
    idle = space.is_idle
    sel = idle & (band >= 0)
    order_arr = np.asarray(order)
    policy[sel] = order_arr[band[sel]]
    comp = ~idle
    policy[comp] = order_arr[np.maximum(band[comp], 0)]
    policy[comp & (space.elapsed >= cutoff)] = NOOP
    return policy


def _initial_policy(
    space: TruncatedStateSpace, user: UserModel, nu: np.ndarray
) -> np.ndarray:
    """Renewal-informed warm start: the best single-server threshold policy.

    Greedy-from-zero initialization stalls Howard iteration for long warm-ups
    (the continue region creeps back one elapsed step per iteration), so the
    warm start must already bridge offload to completion.
    """
    from .renewal import optimize_single_server

    best = None
    for m, p in enumerate(user.success_prob_per_server):
        ren = optimize_single_server(user.tau_min, p, float(nu[m]))
        if best is None or ren.gamma < best[0]:
            best = (ren.gamma, m, ren)
    _, m, ren = best
    cutoff = min(ren.cutoff, space.delta_max - 1)
    return band_policy(space, user, [m], [min(ren.threshold, space.delta_max)], cutoff)


def _policy_matrix(
    space: TruncatedStateSpace, user: UserModel, policy: np.ndarray
) -> sp.csr_matrix:
    S = space.size
    rows, cols, vals = [], [], []
    noop = policy == NOOP
    if noop.any():
        idx = np.nonzero(noop)[0]
        rows.append(idx)
        cols.append(space.noop_next[idx])
        vals.append(np.ones(idx.size))
    tables = space.offload_tables(user.tau_min)
    for m, p in enumerate(user.success_prob_per_server):
        idx = np.nonzero(policy == m)[0]
        if idx.size == 0:
            continue
        elig = tables.eligible[idx]
        cont = tables.cont_next[idx]
        done = tables.done_next[idx]
        rows.append(idx)
        cols.append(cont)
        vals.append(np.where(elig, 1.0 - p, 1.0))
        e_idx = idx[elig]
        if e_idx.size:
            rows.append(e_idx)
            cols.append(done[elig])
            vals.append(np.full(e_idx.size, p))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(S, S),
    )


def _policy_cost(space: TruncatedStateSpace, nu: np.ndarray, policy: np.ndarray):
    cost = space.delta.astype(np.float64).copy()
    off = policy != NOOP
    cost[off] += nu[policy[off]]
    return cost


def policy_average_cost(
    space: TruncatedStateSpace,
    user: UserModel,
    nu: np.ndarray,
    policy: np.ndarray,
    ref_index: int = 0,
):
    """Exact unichain policy evaluation: returns (gamma, differential values)."""
    S = space.size
    P = _policy_matrix(space, user, policy).tocoo()
    c = _policy_cost(space, nu, policy)
    eye = np.arange(S)
    rows = np.concatenate([P.row, eye, eye, [S]])
    cols = np.concatenate([P.col, eye, np.full(S, S), [ref_index]])
    vals = np.concatenate([-P.data, np.ones(S), np.ones(S), [1.0]])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(S + 1, S + 1))
    b = np.concatenate([c, [0.0]])
    try:
        x = spla.splu(A).solve(b)
    except RuntimeError as exc:  # singular factorization
        raise ConvergenceError(f"policy evaluation failed: {exc}", np.inf) from exc
    h = x[:S]
    gamma = float(x[S])
    return gamma, h


def stationary_distribution(
    space: TruncatedStateSpace,
    user: UserModel,
    policy: np.ndarray,
    start_index: int = 0,
) -> np.ndarray:
    """Stationary distribution of the chain a stationary policy induces.

    Restricted to the recurrent class reachable from ``start_index``; states
    outside it get probability zero.
    """
    P = _policy_matrix(space, user, policy).tocsr()
    n_comp, labels = sp.csgraph.connected_components(P, directed=True, connection="strong")
    reach = sp.csgraph.breadth_first_order(P, start_index, return_predecessors=False)
    # The recurrent class is the strongly connected component with no exits
    # among reachable states; for a unichain policy there is exactly one.
    comp_sizes = np.bincount(labels[reach], minlength=n_comp)
    candidates = np.nonzero(comp_sizes)[0]
    closed = []
    for comp in candidates:
        members = np.nonzero(labels == comp)[0]
        sub = P[members]
        mass_inside = sub[:, members].sum()
        if abs(mass_inside - members.size) < 1e-9:
            closed.append(comp)
    if len(closed) != 1:
        raise ConvergenceError(
            f"policy chain is not unichain from start state ({len(closed)} closed classes)",
            np.inf,
        )
    members = np.nonzero(labels == closed[0])[0]
    n = members.size
    A = (P[members][:, members].T - sp.eye(n)).tolil()
    A[n - 1, :] = 1.0  # replace one balance row with normalization
    b = np.zeros(n)
    b[-1] = 1.0
    sol = spla.splu(A.tocsc()).solve(b)
    pi = np.zeros(space.size)
    pi[members] = np.maximum(sol, 0.0)
    pi /= pi.sum()
    return pi


def _flags_boundary_offload(
    space: TruncatedStateSpace, user: UserModel, policy: np.ndarray, gamma: float
) -> bool:
    """True when the solution shows truncation bias: the idle activation
    threshold leaves no room for the post-offload dynamics below the cap, or
    the policy never offloads with gamma pinned at the cap (a never-offload
    optimum is impossible in the untruncated model at finite cost)."""
    idle_pol = policy[: space.num_idle]
    active = np.nonzero(idle_pol != NOOP)[0]
    if not active.size:
        return abs(gamma - space.delta_max) < 1e-6
    margin = user.tau_min + int(np.ceil(2.0 / max(user.success_prob_per_server))) + 2
    return int(active[0]) + 1 >= space.delta_max - margin


def relative_value_iteration(
    user: UserModel,
    nu,
    space: TruncatedStateSpace,
    tol: float = 1e-9,
    max_iters: int = 200_000,
    accelerate: bool = True,
    v_init: np.ndarray | None = None,
    damping: float = 0.5,
) -> SubproblemSolution:
    """Solve the decoupled subproblem at costs ``nu``.

    Stops when the span of the Bellman differences ``TV - V`` falls below
    ``tol``; the returned optimal average cost is then bracketed within that
    span. ``accelerate`` warm-starts with Howard policy iteration; the span
    certificate always comes from genuine value-iteration sweeps.
    """
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape != (user.num_servers,):
        raise ModelError(f"nu must have length {user.num_servers}")
    if np.any(nu < 0):
        raise ModelError("nu must be non-negative")
    if tol <= 0:
        raise ModelError("tol must be positive")

    h = np.zeros(space.size) if v_init is None else v_init.astype(np.float64).copy()
    pi_iters = 0
    if accelerate:
        # Bias-improving Howard iteration; the gain can stay flat for many
        # rounds while the continue region rebuilds, so only a policy
        # fixpoint stops the loop.
        pol = (
            _bellman(space, user, nu, h)[1]
            if v_init is not None
            else _initial_policy(space, user, nu)
        )
        for _ in range(150):
            pi_iters += 1
            gamma, h = policy_average_cost(space, user, nu, pol)
            new_pol = _bellman(space, user, nu, h)[1]
            if np.array_equal(new_pol, pol):
                break
            pol = new_pol

    ref = space.idle_index(1)
    span = np.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        tv, _ = _bellman(space, user, nu, h)
        d = tv - h
        span = float(d.max() - d.min())
        gamma_est = float(d[ref])
        if span < tol:
            break
        h = h + damping * (d - d[ref])
    else:
        raise ConvergenceError(
            f"relative value iteration did not converge: span={span:.3e} after "
            f"{max_iters} sweeps",
            span,
        )

    h = h - h[ref]
    policy = _greedy_policy_exact(space, user, nu, h)
    boundary = _flags_boundary_offload(space, user, policy, gamma_est)
    if boundary:
        warnings.warn(
            "policy first offloads at the truncation bound; results may be biased",
            TruncationWarning,
            stacklevel=2,
        )
    return SubproblemSolution(
        user=user,
        nu=tuple(float(x) for x in nu),
        space=space,
        gamma_star=gamma_est,
        values=h,
        policy=policy,
        iterations=iters,
        pi_iterations=pi_iters,
        final_span=span,
        gamma_bracket=(float(d.min()), float(d.max())),
        converged=True,
        boundary_offload=boundary,
    )


# -- action costs, passive sets, indexability --------------------------------


def mu_table(solution: SubproblemSolution) -> np.ndarray:
    """Expected action costs minus gamma*: column 0 is NoOp, then each server."""
    space = solution.space
    user = solution.user
    nu = np.asarray(solution.nu)
    V = solution.values
    delta = space.delta.astype(np.float64)
    cols = [delta + V[space.noop_next] - solution.gamma_star]
    for m, p in enumerate(user.success_prob_per_server):
        cols.append(
            delta
            + nu[m]
            + space.expected_values(V, user.tau_min, p)
            - solution.gamma_star
        )
    return np.column_stack(cols)


def action_cost_mu(
    user: UserModel,
    state: UserState | int,
    server: int | None,
    nu,
    solution: SubproblemSolution,
) -> float:
    """Expected cost of taking ``server`` (None = NoOp) at ``state``."""
    space = solution.space
    idx = state if isinstance(state, (int, np.integer)) else space.index_of(state)
    table = mu_table(solution)
    col = 0 if server is None else server + 1
    return float(table[idx, col])


@dataclass
class PassiveSet:
    """States at one layer where activating a given server is not strictly best."""

    user: UserModel
    server: int
    layer: int
    nu: tuple[float, ...]
    member_indices: np.ndarray

    @property
    def cardinality(self) -> int:
        return int(self.member_indices.size)


def _passive_mask(solution: SubproblemSolution, server: int) -> np.ndarray:
    table = mu_table(solution)
    M = len(solution.user.success_prob_per_server)
    comp_cols = [0] + [c for c in range(1, M + 1) if c != server + 1]
    best_other = table[:, comp_cols].min(axis=1)
    return best_other <= table[:, server + 1] + 1e-12


def passive_set(
    user: UserModel,
    server: int,
    layer: int,
    nu,
    solution: SubproblemSolution,
) -> PassiveSet:
    """States in ``layer`` where some alternative (incl. NoOp) does at least as well."""
    mask = _passive_mask(solution, server)
    idx = solution.space.layer_indices(layer)
    members = idx[mask[idx]]
    return PassiveSet(user, server, layer, tuple(solution.nu), members)


@dataclass
class SweepPoint:
    nu_m: float
    cardinality_by_layer: tuple[int, int]


@dataclass
class SweepResult:
    points: list[SweepPoint]
    monotone_by_layer: tuple[bool, bool]
    reaches_full_layer: tuple[bool, bool]


def indexability_sweep(
    user: UserModel,
    server: int,
    nu_base,
    grid,
    space: TruncatedStateSpace,
    tol: float = 1e-9,
) -> SweepResult:
    """Passive-set cardinalities per layer along an increasing cost grid.

    Violations of monotonicity are reported in the flags, never raised.
    """
    grid = list(grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ModelError("grid must be strictly increasing")
    nu = np.asarray(nu_base, dtype=np.float64).copy()
    points = []
    v_init = None
    for g in grid:
        nu[server] = g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            sol = relative_value_iteration(user, nu, space, tol=tol, v_init=v_init)
        v_init = sol.values
        cards = tuple(
            passive_set(user, server, layer, nu, sol).cardinality for layer in (1, 2)
        )
        points.append(SweepPoint(float(g), cards))
    mono = tuple(
        all(
            points[i].cardinality_by_layer[l] <= points[i + 1].cardinality_by_layer[l]
            for i in range(len(points) - 1)
        )
        for l in range(2)
    )
    sizes = (space.num_idle, space.num_computing)
    full = tuple(
        points[-1].cardinality_by_layer[l] == sizes[l] for l in range(2)
    )
    return SweepResult(points, mono, full)


# -- threshold structure ------------------------------------------------------


def extract_thresholds(
    space: TruncatedStateSpace, policy: np.ndarray
) -> dict[int, list[tuple[int, int]]]:
    """Run-length encode the policy per slice: D=0 is layer 1, else gen age D.

    Each slice maps increasing ages to a list of (first_age, action) runs.
    """
    out: dict[int, list[tuple[int, int]]] = {}
    idle = policy[: space.num_idle]
    out[0] = _runs(np.arange(1, space.delta_max + 1), idle)
    for d in range(1, space.delta_max + 1):
        base = space.comp_index(d, d)
        ages = []
        acts = []
        for a in range(d, space.delta_max + 1):
            ages.append(a)
            acts.append(policy[space.comp_index(a, d)])
        out[d] = _runs(np.array(ages), np.array(acts))
    return out


def _runs(ages: np.ndarray, actions: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    for age, act in zip(ages, actions):
        if not runs or runs[-1][1] != act:
            runs.append((int(age), int(act)))
    return runs


def replay_thresholds(
    space: TruncatedStateSpace, thresholds: dict[int, list[tuple[int, int]]]
) -> np.ndarray:
    """Reconstruct a policy table from its threshold runs."""
    policy = np.full(space.size, NOOP, dtype=np.int64)

    def fill(indices, ages, runs):
        for i, age in zip(indices, ages):
            act = runs[0][1]
            for start, a in runs:
                if age >= start:
                    act = a
                else:
                    break
            policy[i] = act

    idle_idx = np.arange(space.num_idle)
    fill(idle_idx, np.arange(1, space.delta_max + 1), thresholds[0])
    for d in range(1, space.delta_max + 1):
        idx = [space.comp_index(a, d) for a in range(d, space.delta_max + 1)]
        fill(idx, range(d, space.delta_max + 1), thresholds[d])
    return policy
