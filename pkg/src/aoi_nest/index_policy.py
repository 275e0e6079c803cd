"""Nested index computation: exact bisection and the closed-form fast path.

The index of (state, server) is the smallest activating cost at which some
alternative (another server or doing nothing) stops being strictly worse,
clamped at zero. The bisection route re-solves the subproblem at each probe
cost; the closed form is ``nu_pred + age - gamma*`` over the user's server
order (slowest first, ties by cost), with the do-nothing reference cost 0
standing in below the first server.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, UserModel, UserState
from .renewal import optimize_single_server
from .solver import (
    NOOP,
    SubproblemSolution,
    _greedy_policy_exact,
    mu_table,
    policy_average_cost,
    relative_value_iteration,
)
from .statespace import TruncatedStateSpace
from .verify import VerifyReport, p_rank

__all__ = [
    "BracketCapExceeded",
    "ThresholdSearchError",
    "server_order",
    "predecessor_costs",
    "index_by_bisection",
    "bisect_indices",
    "gamma_star_closed_form",
    "index_closed_form",
    "index_closed_form_fixed_point",
    "ClosedFormIndex",
    "IndexTable",
    "precise_division_check",
]


class BracketCapExceeded(RuntimeError):
    """No cost below the cap makes the state passive (non-indexable sample)."""


class ThresholdSearchError(RuntimeError):
    """The integer threshold search could not certify an optimal policy."""


def server_order(user: UserModel, nu) -> list[int]:
    """Servers sorted by ascending success probability, then cost, then index."""
    nu = np.asarray(nu, dtype=np.float64)
    return sorted(
        range(user.num_servers),
        key=lambda m: (user.success_prob_per_server[m], nu[m], m),
    )


def predecessor_costs(user: UserModel, nu) -> np.ndarray:
    """Reference cost of the next-slower alternative for each server.

    Servers sharing a success probability are interchangeable, so the
    reference is the cheapest server of the previous *distinct-probability*
    band (chaining equal-p servers by cost would compound their prices into a
    runaway ladder). Below the slowest band the reference is the do-nothing
    cost 0.
    """
    nu = np.asarray(nu, dtype=np.float64)
    ps = np.asarray(user.success_prob_per_server)
    bands = np.unique(ps)
    pred = np.zeros(user.num_servers)
    for bi, p in enumerate(bands):
        ref = 0.0 if bi == 0 else float(nu[ps == bands[bi - 1]].min())
        pred[ps == p] = ref
    return pred


# -- bisection ----------------------------------------------------------------


class _ProbeCache:
    """Warm-started subproblem solves keyed by the probed cost."""

    def __init__(self, user: UserModel, nu, server: int, space: TruncatedStateSpace, tol: float):
        self.user = user
        self.nu = np.asarray(nu, dtype=np.float64).copy()
        self.server = server
        self.space = space
        self.tol = tol
        self._cache: dict[float, SubproblemSolution] = {}
        self._last_values: np.ndarray | None = None

    def solve(self, zeta: float) -> SubproblemSolution:
        key = float(zeta)
        if key not in self._cache:
            nu = self.nu.copy()
            nu[self.server] = key
            sol = relative_value_iteration(
                self.user, nu, self.space, tol=self.tol, v_init=self._last_values
            )
            self._last_values = sol.values
            self._cache[key] = sol
        return self._cache[key]

    def passive(self, zeta: float, state_index: int) -> bool:
        sol = self.solve(zeta)
        table = mu_table(sol)
        M = self.user.num_servers
        cols = [0] + [c for c in range(1, M + 1) if c != self.server + 1]
        return bool(
            table[state_index, cols].min() <= table[state_index, self.server + 1] + 1e-12
        )


def index_by_bisection(
    user: UserModel,
    state: UserState | int,
    server: int,
    nu_minus_m,
    space: TruncatedStateSpace,
    bracket_hi: float | None = None,
    tol: float = 1e-6,
    solve_tol: float = 1e-9,
    cache: _ProbeCache | None = None,
) -> float:
    """Exact nested index of one (state, server) via paired subproblem solves."""
    if cache is None:
        cache = _ProbeCache(user, nu_minus_m, server, space, solve_tol)
    idx = state if isinstance(state, (int, np.integer)) else space.index_of(state)
    if cache.passive(0.0, idx):
        return 0.0
    hi = float(bracket_hi) if bracket_hi is not None else float(space.delta_max)
    cap = 8.0 * max(hi, 1.0)
    while not cache.passive(hi, idx):
        hi *= 2.0
        if hi > cap:
            raise BracketCapExceeded(
                f"state {idx} still active for server {server} at cost {hi/2:.3g}"
            )
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cache.passive(mid, idx):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def bisect_indices(
    user: UserModel,
    state_indices,
    server: int,
    nu,
    space: TruncatedStateSpace,
    tol: float = 1e-6,
    solve_tol: float = 1e-9,
) -> np.ndarray:
    """Batch bisection sharing probe solves across states."""
    cache = _ProbeCache(user, nu, server, space, solve_tol)
    out = np.empty(len(state_indices))
    for i, si in enumerate(state_indices):
        out[i] = index_by_bisection(
            user, int(si), server, nu, space, tol=tol, cache=cache
        )
    return out


# -- closed form ---------------------------------------------------------------


@dataclass(frozen=True)
class ClosedFormIndex:
    value: float
    server: int
    used_noop_reference: bool  # first server in the order: reference cost is 0


def index_closed_form(
    user: UserModel,
    state: UserState | int,
    server: int,
    nu,
    gamma_star: float,
    space: TruncatedStateSpace | None = None,
) -> ClosedFormIndex:
    """One-shot index ``max(0, nu_pred + age - gamma*)`` at the given gamma*."""
    if isinstance(state, (int, np.integer)):
        if space is None:
            raise ModelError("state index requires the space")
        delta = int(space.delta[int(state)])
    else:
        delta = state.delta
    pred = predecessor_costs(user, nu)
    ps = user.success_prob_per_server
    value = max(0.0, float(pred[server]) + delta - gamma_star)
    return ClosedFormIndex(value, server, used_noop_reference=ps[server] == min(ps))


def index_closed_form_fixed_point(
    user: UserModel,
    state: UserState | int,
    server: int,
    nu,
    gamma_fn,
    space: TruncatedStateSpace | None = None,
    tol: float = 1e-9,
    max_iters: int = 80,
) -> float:
    """Solve I = nu_pred + age - gamma*([nu_-m, I]) for the index.

    ``gamma_fn(nu_vector) -> float`` evaluates the subproblem optimum; the map
    is a contraction (slope is minus the server's usage, in (-1, 0]).
    """
    if isinstance(state, (int, np.integer)):
        if space is None:
            raise ModelError("state index requires the space")
        delta = int(space.delta[int(state)])
    else:
        delta = state.delta
    nu = np.asarray(nu, dtype=np.float64).copy()
    zeta = max(0.0, float(nu[server]))
    for _ in range(max_iters):
        probe = nu.copy()
        probe[server] = zeta
        pred = predecessor_costs(user, probe)
        nxt = max(0.0, float(pred[server]) + delta - gamma_fn(probe))
        if abs(nxt - zeta) < tol:
            return nxt
        zeta = nxt
    return zeta


# -- closed-form gamma* via integer threshold search ---------------------------


def _band_policy(
    space: TruncatedStateSpace,
    user: UserModel,
    order: list[int],
    switch_ages: list[int],
    cutoff: int,
) -> np.ndarray:
    """Threshold policy: serve the band of the current age, drop at the cutoff.

    ``switch_ages[k]`` is the first age at which server ``order[k]`` is used;
    ages below ``switch_ages[0]`` wait at layer 1 and use the slowest server
    at layer 2.
    """
    policy = np.full(space.size, NOOP, dtype=np.int64)
    ages = space.delta
    band = np.zeros(space.size, dtype=np.int64) - 1
    for k, age in enumerate(switch_ages):
        band[ages >= age] = k
    idle = space.is_idle
    sel = idle & (band >= 0)
    policy[sel] = np.asarray(order)[band[sel]]
    comp = ~idle
    comp_band = np.maximum(band, 0)
    policy[comp] = np.asarray(order)[comp_band[comp]]
    drop = comp & (space.elapsed >= cutoff)
    policy[drop] = NOOP
    return policy


def _bellman_residual(
    space: TruncatedStateSpace, user: UserModel, nu: np.ndarray, gamma: float, values: np.ndarray
) -> float:
    delta = space.delta.astype(np.float64)
    best = delta + values[space.noop_next]
    for m, p in enumerate(user.success_prob_per_server):
        q = delta + nu[m] + space.expected_values(values, user.tau_min, p)
        best = np.minimum(best, q)
    resid = best - values - gamma
    return float(resid.max() - resid.min())


def gamma_star_closed_form(
    user: UserModel,
    nu,
    space: TruncatedStateSpace,
    thresholds: dict | None = None,
    certify_tol: float = 1e-7,
) -> float:
    """Optimal average cost from the threshold equation system (no warm-up regime).

    Searches integer threshold assignments, evaluating each candidate policy
    exactly as a finite linear system, and certifies the winner against the
    Bellman equation. Requires tau_min == 0 (tasks may finish after a single
    computing slot), the regime the closed-form recurrences assume.
    """
    if user.tau_min != 0:
        raise ModelError("closed-form gamma* requires the no-warm-up regime (tau_min=0)")
    nu = np.asarray(nu, dtype=np.float64)
    order = server_order(user, nu)
    M = len(order)
    K = space.delta_max

    if thresholds is not None:
        switch_ages = [int(thresholds[k]) for k in range(M)]
        cutoff = int(thresholds.get("cutoff", K))
        pol = _band_policy(space, user, order, switch_ages, cutoff)
        return policy_average_cost(space, user, nu, pol)[0]

    base = optimize_single_server(0, user.success_prob_per_server[order[0]], float(nu[order[0]]))
    gamma = base.gamma
    best: tuple[float, np.ndarray] | None = None
    for _ in range(40):
        # Candidate first thresholds and cutoffs near the single-server optimum;
        # later switch ages come from the gamma sandwich and get re-derived as
        # the gamma estimate improves.
        cands_h1 = sorted(
            {max(1, base.threshold + d) for d in range(-3, 4)}
            | {max(1, int(round(gamma - 0.5)) + d) for d in range(-2, 3)}
        )
        cands_cut = sorted(
            {max(1, base.cutoff + d) for d in (-2, -1, 0, 1, 2, 4, 8)} | {K}
        )
        for h1 in cands_h1:
            ages = [min(h1, K)]
            for k in range(1, M):
                a = int(round(gamma + nu[order[k]] - nu[order[k - 1]]))
                ages.append(max(ages[-1], min(a, K)))
            for cut in cands_cut:
                pol = _band_policy(space, user, order, ages, cut)
                g = policy_average_cost(space, user, nu, pol)[0]
                if best is None or g < best[0] - 1e-13:
                    best = (g, pol.copy())
        if best is None:
            raise ThresholdSearchError("no feasible threshold assignment")
        if abs(best[0] - gamma) < 1e-12:
            break
        gamma = best[0]

    assert best is not None
    gamma, pol = best
    gamma, values = policy_average_cost(space, user, nu, pol)
    # Off-path states can tie in average cost yet miss the Bellman minimum
    # (e.g. drop-vs-continue where layer 2 is never visited); polish with a
    # few exact improvement rounds so the certificate below is rigorous.
    for _ in range(30):
        improved = _greedy_policy_exact(space, user, nu, values)
        if np.array_equal(improved, pol):
            break
        pol = improved
        gamma, values = policy_average_cost(space, user, nu, pol)
    resid = _bellman_residual(space, user, nu, gamma, values)
    if resid > certify_tol:
        raise ThresholdSearchError(
            f"threshold search exhausted without certification (residual {resid:.3e})"
        )
    return float(gamma)


# -- index tables and precise division -----------------------------------------


@dataclass
class IndexTable:
    """Per (user, server) index values at the users' current states."""

    values: np.ndarray  # N x M
    method: str  # "closed-form" | "bisection"
    layer: np.ndarray  # N
    delta: np.ndarray  # N
    gen_age: np.ndarray  # N (0 for idle)

    def __post_init__(self) -> None:
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ModelError("index values must be finite and non-negative")


def precise_division_check(
    user: UserModel,
    nu,
    sample_states,
    solution: SubproblemSolution,
    index_fn,
    tol: float = 1e-6,
) -> VerifyReport:
    """Replay the three index-vs-cost classification clauses on sampled states.

    index_fn(state_index, server) -> float supplies the nested index.
    """
    nu = np.asarray(nu, dtype=np.float64)
    table = mu_table(solution)
    M = user.num_servers
    violations = []
    checked = 0
    for si in sample_states:
        si = int(si)
        for m in range(M):
            cols = [0] + [c for c in range(1, M + 1) if c != m + 1]
            best_other = float(table[si, cols].min())
            mu_m = float(table[si, m + 1])
            margin = mu_m - best_other  # positive: some alternative beats m
            idx_val = float(index_fn(si, m))
            checked += 1
            if idx_val >= nu[m] - tol:
                # Clauses (i)/(ii): m must be (weakly/strictly) best.
                if margin > tol:
                    violations.append((si, m, "index>=cost", margin))
            else:
                # Clause (iii): some alternative must strictly beat m.
                if margin < -tol:
                    violations.append((si, m, "index<cost", margin))
    return VerifyReport("precise-division", not violations, checked, violations)
