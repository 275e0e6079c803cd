"""Per-slot scheduling policies and the multi-user episode loop.

Each slot: compute index weights from the current states and costs, solve the
assignment problem, map the matching to offload actions (unmatched computing
users drop their task by default), then smooth the costs toward the matching
duals. State evolution is fully vectorized; one uniform draw per user per
slot reproduces the kernel's transition law exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .assignment import max_weight_assignment
from .bounds import BoundResult, relaxed_lower_bound
from .index_policy import predecessor_costs, server_order, IndexTable
from .model import (
    Computing,
    Idle,
    ModelError,
    NoOp,
    Offload,
    ScenarioConfig,
    UserModel,
    UserState,
)
from .renewal import optimize_single_server
from .solver import relative_value_iteration
from .statespace import get_space

__all__ = [
    "DualState",
    "dual_cost_update",
    "GroupGammaCache",
    "nested_index_policy_step",
    "EpisodeMetrics",
    "SimulationResult",
    "run_simulation",
    "run_episode",
    "POLICIES",
    "SimState",
]

POLICIES = ("nested", "mamp", "marp", "rrp", "lower-bound-replay")

_BOUND_CACHE: dict[ScenarioConfig, BoundResult] = {}


@lru_cache(maxsize=65536)
def _renewal_gamma_memo(tau_min: int, p: float, nu_eff: float) -> float:
    # The cost is quantized by the caller; a 0.01 grid shifts gamma* far less
    # than the 0.05 refresh threshold already tolerates.
    return optimize_single_server(tau_min, p, nu_eff).gamma


def relaxed_policies_for(config: ScenarioConfig) -> BoundResult:
    """Converged relaxed-problem policies, cached per scenario."""
    if config not in _BOUND_CACHE:
        _BOUND_CACHE[config] = relaxed_lower_bound(config)
    return _BOUND_CACHE[config]


@dataclass(frozen=True)
class DualState:
    """Smoothed activating costs; alpha = 1/beta is the averaging step."""

    nu: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ModelError(f"alpha must be in (0, 1], got {self.alpha}")
        if np.any(self.nu < 0):
            raise ModelError("costs must be non-negative")


def dual_cost_update(state: DualState, duals) -> DualState:
    """Convex-combination step toward the latest assignment duals."""
    duals = np.asarray(duals, dtype=np.float64)
    if np.any(duals < 0):
        raise ModelError("duals must be non-negative")
    nu = (1.0 - state.alpha) * state.nu + state.alpha * duals
    return DualState(nu, state.alpha)


class GroupGammaCache:
    """Per-group subproblem optima, refreshed lazily as the costs move."""

    def __init__(self, config: ScenarioConfig, refresh_eps: float = 0.05):
        self.config = config
        self.models = [UserModel.from_group(g) for g in config.groups]
        self.refresh_eps = refresh_eps
        self._nu_at_solve: np.ndarray | None = None
        self._gammas: np.ndarray | None = None
        self._warm: list[np.ndarray | None] = [None] * len(self.models)

    def gammas(self, nu: np.ndarray) -> np.ndarray:
        if (
            self._nu_at_solve is None
            or np.abs(nu - self._nu_at_solve).max() > self.refresh_eps
        ):
            self._gammas = self._solve(nu)
            self._nu_at_solve = nu.copy()
        return self._gammas

    def _solve(self, nu: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.models))
        for gi, model in enumerate(self.models):
            p = model.uniform_p
            if p is not None:
                # Quantize at the refresh granularity; gamma* moves by at most
                # the usage fraction times the quantization step.
                out[gi] = _renewal_gamma_memo(
                    model.tau_min, p, round(float(nu.min()) / 0.05) * 0.05
                )
            else:
                space = get_space(self.config.truncation)
                sol = relative_value_iteration(
                    model, nu, space, v_init=self._warm[gi]
                )
                self._warm[gi] = sol.values
                out[gi] = sol.gamma_star
        return out


@dataclass
class SimState:
    """Dense state of every user (vector form of the tagged union)."""

    delta: np.ndarray  # int64[N]
    computing: np.ndarray  # bool[N]
    gen: np.ndarray  # int64[N], valid where computing
    server: np.ndarray  # int64[N], -1 where idle

    @classmethod
    def initial(cls, num_users: int) -> "SimState":
        return cls(
            np.ones(num_users, dtype=np.int64),
            np.zeros(num_users, dtype=bool),
            np.zeros(num_users, dtype=np.int64),
            np.full(num_users, -1, dtype=np.int64),
        )

    @classmethod
    def from_states(cls, states: list[UserState]) -> "SimState":
        n = len(states)
        out = cls.initial(n)
        for i, s in enumerate(states):
            out.delta[i] = s.delta
            if isinstance(s, Computing):
                out.computing[i] = True
                out.gen[i] = s.gen_age
                out.server[i] = -1 if s.server is None else s.server
        return out

    def to_states(self) -> list[UserState]:
        out: list[UserState] = []
        for i in range(self.delta.size):
            if self.computing[i]:
                srv = int(self.server[i])
                out.append(
                    Computing(int(self.delta[i]), int(self.gen[i]), srv if srv >= 0 else None)
                )
            else:
                out.append(Idle(int(self.delta[i])))
        return out


def _group_index(config: ScenarioConfig) -> np.ndarray:
    return np.repeat(np.arange(len(config.groups)), config.group_user_counts())


def _tau_by_user(config: ScenarioConfig) -> np.ndarray:
    return np.repeat(
        np.array([g.tau_min for g in config.groups], dtype=np.int64),
        config.group_user_counts(),
    )


def step_states(
    sim: SimState,
    actions: np.ndarray,
    p_mat: np.ndarray,
    tau: np.ndarray,
    delta_max: int,
    uniforms: np.ndarray,
) -> int:
    """Advance every user one slot in place; returns the completion count."""
    off = actions >= 0
    p_sel = np.zeros(sim.delta.size)
    p_sel[off] = p_mat[np.nonzero(off)[0], actions[off]]
    elig = off & np.where(
        sim.computing,
        (sim.delta - sim.gen > tau) | (tau == 0),
        tau == 0,
    )
    complete = elig & (uniforms < p_sel)

    new_delta = np.minimum(sim.delta + 1, delta_max)
    over = sim.delta + 1 - new_delta
    cont = off & ~complete
    new_gen = np.where(sim.computing, sim.gen, sim.delta) - over
    np.maximum(new_gen, 1, out=new_gen)

    done_delta = np.where(sim.computing, sim.delta - sim.gen + 1, 1)

    sim.delta = np.where(complete, done_delta, new_delta)
    sim.gen = np.where(cont, new_gen, 0)
    sim.server = np.where(cont, actions, -1)
    sim.computing = cont
    return int(complete.sum())


# -- policy step functions ------------------------------------------------------


def nested_weights(
    sim: SimState,
    nu: np.ndarray,
    gammas: np.ndarray,
    group_idx: np.ndarray,
    config: ScenarioConfig,
) -> np.ndarray:
    """Closed-form index weights max(0, nu_pred + age - gamma) per (user, server)."""
    G = len(config.groups)
    M = config.num_servers
    pred = np.empty((G, M))
    for gi, g in enumerate(config.groups):
        pred[gi] = predecessor_costs(UserModel.from_group(g), nu)
    w = pred[group_idx] + (sim.delta - gammas[group_idx])[:, None]
    return np.maximum(w, 0.0)


def _all_uniform(config: ScenarioConfig) -> bool:
    return all(g.uniform_p is not None for g in config.groups)


def _nested_step_arrays(
    sim: SimState,
    dual: DualState,
    cache: GroupGammaCache,
    group_idx: np.ndarray,
    config: ScenarioConfig,
):
    gammas = cache.gammas(dual.nu)
    N = sim.delta.size
    actions = np.full(N, -1, dtype=np.int64)
    M = config.num_servers
    if _all_uniform(config):
        # Every weight column is identical (single probability band, NoOp
        # reference 0), so the optimal matching serves the top-M positive
        # weights and every server's least dual is the best unserved weight.
        w_row = np.maximum(sim.delta - gammas[group_idx], 0.0)
        order = np.lexsort((np.arange(N), -w_row))
        take = order[: min(M, N)]
        take = take[w_row[take] > 0.0]
        # Keep matched computing users on their server; fill the rest in
        # index order (required when server switching is disabled).
        free = np.ones(M, dtype=bool)
        keep = take[(sim.server[take] >= 0) & sim.computing[take]]
        # Server collisions only arise among off-capacity held users; first
        # claimant keeps the server, the rest are placed like fresh tasks.
        first = np.zeros(M, dtype=bool)
        keep_ok = []
        for u in keep:
            s = sim.server[u]
            if not first[s]:
                first[s] = True
                keep_ok.append(u)
        keep = np.asarray(keep_ok, dtype=np.int64)
        if keep.size:
            actions[keep] = sim.server[keep]
            free[sim.server[keep]] = False
        fresh = take[actions[take] < 0]
        actions[fresh] = np.nonzero(free)[0][: fresh.size]
        marginal = 0.0
        if take.size == M and N > M:
            marginal = float(w_row[order[M]])
        duals = np.full(M, marginal)
        W = np.broadcast_to(w_row[:, None], (N, M))
        wmax = float(w_row.max()) if N else 0.0
    else:
        W = nested_weights(sim, dual.nu, gammas, group_idx, config)
        rows = np.nonzero(W.max(axis=1) > 0.0)[0]
        duals = np.zeros(M)
        if rows.size:
            asg = max_weight_assignment(W[rows])
            matched = asg.matched_server >= 0
            actions[rows[matched]] = asg.matched_server[matched]
            duals = asg.server_duals
        wmax = float(W.max()) if W.size else 0.0
    if config.on_unassigned == "hold":
        hold = sim.computing & (actions < 0) & (sim.server >= 0)
        actions[hold] = sim.server[hold]  # off-capacity continuation
    new_dual = dual_cost_update(dual, duals)
    return actions, new_dual, W, wmax


def nested_index_policy_step(
    states: list[UserState],
    dual: DualState,
    cache: GroupGammaCache,
    config: ScenarioConfig,
):
    """One slot of the index policy on explicit states.

    Returns (actions per user, updated dual state, index table).
    """
    sim = SimState.from_states(states)
    group_idx = _group_index(config)
    actions, new_dual, W, _ = _nested_step_arrays(sim, dual, cache, group_idx, config)
    acts: list[NoOp | Offload] = [
        Offload(int(a)) if a >= 0 else NoOp() for a in actions
    ]
    table = IndexTable(
        values=np.array(W),
        method="closed-form",
        layer=np.where(sim.computing, 2, 1),
        delta=sim.delta.copy(),
        gen_age=np.where(sim.computing, sim.gen, 0),
    )
    return acts, new_dual, table


def _rank_assign(keys: np.ndarray, server_rank: np.ndarray, num_servers: int) -> np.ndarray:
    """Assign the k-th ranked user to the k-th ranked server (ties by index)."""
    n = keys.size
    order = np.lexsort((np.arange(n), -keys))
    k = min(n, num_servers)
    actions = np.full(n, -1, dtype=np.int64)
    actions[order[:k]] = server_rank[:k]
    return actions


def _server_quality_rank(config: ScenarioConfig) -> np.ndarray:
    quality = np.zeros(config.num_servers)
    for g in config.groups:
        quality += np.asarray(g.success_prob_per_server) * g.count
    return np.lexsort((np.arange(config.num_servers), -quality))


def mamp_actions(sim: SimState, config: ScenarioConfig) -> np.ndarray:
    return _rank_assign(
        sim.delta.astype(np.float64), _server_quality_rank(config), config.num_servers
    )


def marp_actions(
    sim: SimState, config: ScenarioConfig, p_user: np.ndarray
) -> np.ndarray:
    elapsed = np.where(sim.computing, sim.delta - sim.gen, 0)
    w = sim.delta + elapsed / p_user
    return _rank_assign(w, _server_quality_rank(config), config.num_servers)


def rrp_actions(
    sim: SimState,
    config: ScenarioConfig,
    bound: BoundResult,
    group_idx: np.ndarray,
    rng: np.random.Generator,
    enforce_capacity: bool = True,
) -> np.ndarray:
    """Relaxed-optimal proposals, thinned uniformly at random to feasibility."""
    n = sim.delta.size
    thresholds = np.array([p.threshold for p in bound.group_policies])
    cutoffs = np.array([p.cutoff for p in bound.group_policies])
    actions = np.full(n, -1, dtype=np.int64)

    has_table = any(p.policy_table is not None for p in bound.group_policies)
    if has_table:
        space = get_space(config.truncation)
        state_idx = np.where(
            sim.computing,
            space._comp_base[sim.delta] + np.maximum(sim.gen, 1) - 1,
            sim.delta - 1,
        )
    for gi, gp in enumerate(bound.group_policies):
        if gp.policy_table is None:
            continue
        sel = group_idx == gi
        actions[sel] = gp.policy_table[state_idx[sel]]

    simple = np.array(
        [bound.group_policies[g].policy_table is None for g in group_idx]
    )
    idle_offload = simple & ~sim.computing & (sim.delta >= thresholds[group_idx])
    cont = simple & sim.computing & (sim.delta - sim.gen < cutoffs[group_idx])
    stay = cont & (sim.server >= 0)
    actions[stay] = sim.server[stay]
    fresh = idle_offload | (cont & (sim.server < 0))
    if fresh.any():
        # Ties among preferred servers break toward currently free ones, so a
        # fresh proposal does not needlessly evict an in-flight task.
        occupied = np.zeros(config.num_servers, dtype=bool)
        stayed = np.unique(sim.server[stay]) if stay.any() else []
        occupied[stayed] = True
        idx = np.nonzero(fresh)[0]
        for i in idx:
            servers = bound.group_policies[group_idx[i]].preferred_servers
            free = [m for m in servers if not occupied[m]]
            pool = free if free else servers
            m = pool[rng.integers(len(pool))]
            actions[i] = m
            occupied[m] = True
    if not enforce_capacity:
        return actions

    proposers = np.nonzero(actions >= 0)[0]
    if proposers.size == 0:
        return actions
    perm = rng.permutation(proposers)
    taken = np.zeros(config.num_servers, dtype=bool)
    for i in perm:
        m = actions[i]
        if taken[m]:
            actions[i] = -1
        else:
            taken[m] = True
    return actions


def mamp_step(states: list[UserState], config: ScenarioConfig):
    sim = SimState.from_states(states)
    return [
        Offload(int(a)) if a >= 0 else NoOp() for a in mamp_actions(sim, config)
    ]


def marp_step(states: list[UserState], config: ScenarioConfig):
    sim = SimState.from_states(states)
    p_user = np.array(
        [max(config.user_model(n).success_prob_per_server) for n in range(len(states))]
    )
    return [
        Offload(int(a)) if a >= 0 else NoOp()
        for a in marp_actions(sim, config, p_user)
    ]


def rrp_step(
    states: list[UserState],
    relaxed: BoundResult,
    config: ScenarioConfig,
    rng: np.random.Generator,
):
    sim = SimState.from_states(states)
    acts = rrp_actions(sim, config, relaxed, _group_index(config), rng)
    return [Offload(int(a)) if a >= 0 else NoOp() for a in acts]


# -- episodes --------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    policy: str
    scale: int
    seed: int
    avg_aoi: float  # normalized mean age, burn-in excluded
    completions: int
    nu_end: np.ndarray
    nu_window_mean: np.ndarray
    nu_window_std: np.ndarray
    mean_age_series: np.ndarray | None = None
    nu_series: np.ndarray | None = None  # thinned
    nu_series_stride: int = 1
    occupancy: list[np.ndarray] | None = None
    wall_seconds: float = 0.0


@dataclass
class SimulationResult:
    config: ScenarioConfig
    policy: str
    episodes: list[EpisodeMetrics]

    @property
    def mean_aoi(self) -> float:
        return float(np.mean([e.avg_aoi for e in self.episodes]))

    @property
    def stderr_aoi(self) -> float:
        vals = [e.avg_aoi for e in self.episodes]
        if len(vals) < 2:
            return 0.0
        return float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


def run_episode(
    config: ScenarioConfig,
    policy: str,
    seed: int,
    keep_series: bool = True,
    nu_thin: int = 10,
    collect_occupancy: bool = False,
    timeseries_writer=None,
    relaxed: BoundResult | None = None,
) -> EpisodeMetrics:
    """Simulate one seeded episode of ``config.horizon`` slots."""
    if policy not in POLICIES:
        raise ModelError(f"unknown policy {policy!r}; choose from {POLICIES}")
    t_start = time.perf_counter()
    N, M, T = config.num_users, config.num_servers, config.horizon
    K = config.truncation
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.rng_seed, spawn_key=(int(seed),))
    )
    sim = SimState.initial(N)
    group_idx = _group_index(config)
    tau = _tau_by_user(config)
    p_mat = config.p_matrix()
    p_user = p_mat.max(axis=1)

    dual = DualState(
        np.asarray(config.initial_costs, dtype=np.float64).copy(),
        alpha=1.0 / config.smoothing,
    )
    cache = GroupGammaCache(config)
    if policy in ("rrp", "lower-bound-replay") and relaxed is None:
        relaxed = relaxed_policies_for(config)

    mean_age = np.empty(T, dtype=np.float32)
    completions = 0
    window = min(1000, T)
    nu_window = np.empty((window, M))
    n_thin = (T + nu_thin - 1) // nu_thin
    nu_series = np.empty((n_thin, M), dtype=np.float32) if keep_series else None
    occupancy = None
    if collect_occupancy:
        occ_space = get_space(K)
        occupancy = [np.zeros(occ_space.size) for _ in config.groups]
        comp_base = occ_space._comp_base

    max_index_seen = float(dual.nu.max())
    for t in range(T):
        mean_age[t] = sim.delta.mean()
        if collect_occupancy:
            state_idx = np.where(
                sim.computing,
                comp_base[sim.delta] + np.maximum(sim.gen, 1) - 1,
                sim.delta - 1,
            )
            for gi in range(len(config.groups)):
                np.add.at(occupancy[gi], state_idx[group_idx == gi], 1.0)

        if policy == "nested":
            actions, dual, _, wmax = _nested_step_arrays(
                sim, dual, cache, group_idx, config
            )
            max_index_seen = max(max_index_seen, wmax)
            assert dual.nu.max() <= max_index_seen + 1.0
        elif policy == "mamp":
            actions = mamp_actions(sim, config)
        elif policy == "marp":
            actions = marp_actions(sim, config, p_user)
        elif policy == "rrp":
            actions = rrp_actions(sim, config, relaxed, group_idx, rng)
        else:  # lower-bound-replay
            actions = rrp_actions(
                sim, config, relaxed, group_idx, rng, enforce_capacity=False
            )

        uniforms = rng.random(N)
        slot_completions = step_states(sim, actions, p_mat, tau, K, uniforms)
        completions += slot_completions
        nu_window[t % window] = dual.nu
        if keep_series and t % nu_thin == 0:
            nu_series[t // nu_thin] = dual.nu
        if timeseries_writer is not None:
            timeseries_writer(t + 1, float(mean_age[t]), dual.nu, slot_completions)

    burn = T // 10
    if collect_occupancy:
        for gi in range(len(config.groups)):
            occupancy[gi] /= occupancy[gi].sum()
    return EpisodeMetrics(
        policy=policy,
        scale=config.scale,
        seed=seed,
        avg_aoi=float(mean_age[burn:].mean()),
        completions=completions,
        nu_end=dual.nu.copy(),
        nu_window_mean=nu_window.mean(axis=0),
        nu_window_std=nu_window.std(axis=0),
        mean_age_series=mean_age if keep_series else None,
        nu_series=nu_series,
        nu_series_stride=nu_thin,
        occupancy=occupancy,
        wall_seconds=time.perf_counter() - t_start,
    )


def run_simulation(
    config: ScenarioConfig,
    policy: str,
    seeds: list[int],
    keep_series: bool = False,
    relaxed: BoundResult | None = None,
    **episode_kwargs,
) -> SimulationResult:
    """Replicate episodes across seeds and aggregate the normalized age."""
    if not seeds:
        raise ModelError("seed list must not be empty")
    if policy in ("rrp", "lower-bound-replay") and relaxed is None:
        relaxed = relaxed_policies_for(config)
    episodes = [
        run_episode(
            config, policy, s, keep_series=keep_series, relaxed=relaxed, **episode_kwargs
        )
        for s in seeds
    ]
    return SimulationResult(config, policy, episodes)
