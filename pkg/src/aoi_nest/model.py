"""Per-user state, actions, stochastic transition kernel, and stage costs.

Time is slotted. Each user is either idle (layer 1, state = age ``delta``) or
waiting for an in-flight computation (layer 2, state = ``(delta, gen_age)``
with optional server tag). Service is shifted-geometric: after a mandatory
warm-up of ``tau_min`` computed slots, every further computing slot completes
independently with the server's success probability. ``tau_min == 0`` means
the task may complete after its very first computing slot, i.e. the offload
slot itself is a completion opportunity.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "GroupSpec",
    "ScenarioConfig",
    "UserModel",
    "Idle",
    "Computing",
    "NoOp",
    "Offload",
    "TransitionDistribution",
    "RngStreams",
    "successor_distribution",
    "sample_transition",
    "stage_cost",
    "clamp_state",
    "default_truncation",
]

PROB_TOL = 1e-12


class ModelError(ValueError):
    """Invalid scenario, state, or action."""


@dataclass(frozen=True)
class GroupSpec:
    """A block of identical users: warm-up slots and per-server success probs."""

    count: int
    tau_min: int
    success_prob_per_server: tuple[float, ...]

    def validate(self, num_servers: int) -> None:
        if self.count <= 0:
            raise ModelError(f"group count must be positive, got {self.count}")
        if self.tau_min < 0:
            raise ModelError(f"tau_min must be >= 0, got {self.tau_min}")
        if len(self.success_prob_per_server) != num_servers:
            raise ModelError(
                f"success_prob_per_server has {len(self.success_prob_per_server)} "
                f"entries, expected {num_servers}"
            )
        for p in self.success_prob_per_server:
            if not (0.0 < p <= 1.0):
                raise ModelError(f"success probability {p} outside (0, 1]")

    @property
    def uniform_p(self) -> float | None:
        """The common success probability if it is server-independent, else None."""
        ps = set(self.success_prob_per_server)
        return self.success_prob_per_server[0] if len(ps) == 1 else None


def default_truncation(groups: tuple[GroupSpec, ...]) -> int:
    """Age cap heuristic leaving negligible stationary mass above it."""
    max_tau = max(g.tau_min for g in groups)
    max_inv_p = max(1.0 / min(g.success_prob_per_server) for g in groups)
    return int(40 * max(1, max_tau) * max_inv_p)


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description for one system instance."""

    num_users: int
    num_servers: int
    groups: tuple[GroupSpec, ...]
    horizon: int
    smoothing: float
    initial_costs: tuple[float, ...] = ()
    truncation: int | None = None
    rng_seed: int = 0
    scale: int = 1
    allow_server_switch: bool = True
    on_unassigned: str = "drop"

    def __post_init__(self) -> None:
        if self.num_users < 0:
            raise ModelError("num_users must be >= 0")
        if self.num_servers <= 0:
            raise ModelError("num_servers must be positive")
        if self.horizon <= 0:
            raise ModelError("horizon must be positive")
        if self.smoothing <= 0:
            raise ModelError("smoothing must be positive")
        if self.scale <= 0:
            raise ModelError("scale must be positive")
        if self.on_unassigned not in ("drop", "hold"):
            raise ModelError(f"on_unassigned must be drop|hold, got {self.on_unassigned!r}")
        for g in self.groups:
            g.validate(self.num_servers)
        total = sum(g.count for g in self.groups)
        if total != self.num_users:
            raise ModelError(
                f"group counts sum to {total}, expected num_users={self.num_users}"
            )
        if not self.initial_costs:
            object.__setattr__(self, "initial_costs", (0.0,) * self.num_servers)
        if len(self.initial_costs) != self.num_servers:
            raise ModelError(
                f"initial_costs has {len(self.initial_costs)} entries, "
                f"expected {self.num_servers}"
            )
        if any(c < 0 for c in self.initial_costs):
            raise ModelError("initial_costs must be non-negative")
        if self.truncation is None:
            if not self.groups:
                raise ModelError("truncation required when there are no groups")
            object.__setattr__(self, "truncation", default_truncation(self.groups))
        if self.truncation < 2:
            raise ModelError("truncation must be >= 2")
        if self.groups and self.truncation <= max(g.tau_min for g in self.groups) + 1:
            # The kernel stays well-defined (such tasks simply never finish),
            # but no solver or simulation result is meaningful.
            warnings.warn(
                f"truncation {self.truncation} does not exceed max tau_min + 1; "
                "warm-ups cannot complete within the age cap",
                UserWarning,
                stacklevel=2,
            )

    # -- user/group lookups -------------------------------------------------

    def group_of_user(self, n: int) -> int:
        if not (0 <= n < self.num_users):
            raise ModelError(f"user index {n} out of range")
        acc = 0
        for gi, g in enumerate(self.groups):
            acc += g.count
            if n < acc:
                return gi
        raise ModelError(f"user index {n} not covered by groups")

    def user_model(self, n: int) -> "UserModel":
        return UserModel.from_group(self.groups[self.group_of_user(n)])

    def group_user_counts(self) -> np.ndarray:
        return np.array([g.count for g in self.groups], dtype=np.int64)

    def p_matrix(self) -> np.ndarray:
        """N x M matrix of success probabilities."""
        rows = []
        for g in self.groups:
            rows.extend([list(g.success_prob_per_server)] * g.count)
        return np.array(rows, dtype=np.float64).reshape(self.num_users, self.num_servers)


@dataclass(frozen=True)
class UserModel:
    """The per-user parameters the decoupled subproblem depends on."""

    tau_min: int
    success_prob_per_server: tuple[float, ...]

    @classmethod
    def from_group(cls, group: GroupSpec) -> "UserModel":
        return cls(group.tau_min, group.success_prob_per_server)

    @property
    def num_servers(self) -> int:
        return len(self.success_prob_per_server)

    @property
    def uniform_p(self) -> float | None:
        ps = set(self.success_prob_per_server)
        return self.success_prob_per_server[0] if len(ps) == 1 else None


# -- states and actions ------------------------------------------------------


@dataclass(frozen=True)
class Idle:
    """Layer-1 state: no task in flight."""

    delta: int

    def __post_init__(self) -> None:
        if self.delta < 1:
            raise ModelError(f"age must be >= 1, got {self.delta}")


@dataclass(frozen=True)
class Computing:
    """Layer-2 state: task in flight; elapsed compute time is delta - gen_age."""

    delta: int
    gen_age: int
    server: int | None = None

    def __post_init__(self) -> None:
        if self.gen_age < 1 or self.delta < self.gen_age:
            raise ModelError(
                f"need delta >= gen_age >= 1, got ({self.delta}, {self.gen_age})"
            )

    @property
    def elapsed(self) -> int:
        return self.delta - self.gen_age


UserState = Idle | Computing


@dataclass(frozen=True)
class NoOp:
    """Do nothing; an in-flight task is dropped."""


@dataclass(frozen=True)
class Offload:
    """Offload to (or keep computing on) server ``server`` this slot."""

    server: int


Action = NoOp | Offload

TransitionDistribution = list[tuple[UserState, float]]


def clamp_state(state: UserState, delta_max: int) -> UserState:
    """Saturate the age at the truncation bound.

    For computing states the clamp preserves elapsed compute time by sliding
    gen_age down with the capped age (a frozen gen_age would freeze elapsed
    time too and trap the task below its warm-up forever).
    """
    if isinstance(state, Idle):
        return Idle(min(state.delta, delta_max))
    if state.delta <= delta_max:
        return state
    overshoot = state.delta - delta_max
    return Computing(delta_max, max(state.gen_age - overshoot, 1), state.server)


def _check_action(state: UserState, action: Action, config: ScenarioConfig) -> None:
    if isinstance(action, Offload):
        if not (0 <= action.server < config.num_servers):
            raise ModelError(f"server index {action.server} out of range")
        if (
            not config.allow_server_switch
            and isinstance(state, Computing)
            and state.server is not None
            and state.server != action.server
        ):
            raise ModelError(
                "cross-server continuation disabled (allow_server_switch=off)"
            )


def successor_distribution(
    state: UserState, action: Action, config: ScenarioConfig, user: int
) -> TransitionDistribution:
    """Next-state distribution for one user under one action.

    NoOp always increments the age (dropping any in-flight task). Offloading
    from idle generates a fresh task; a completable computing slot finishes
    with the server's success probability and resets the age to elapsed+1.
    """
    delta_max = config.truncation
    if state.delta > delta_max:
        raise ModelError(f"state age {state.delta} exceeds truncation {delta_max}")
    _check_action(state, action, config)
    model = config.user_model(user)
    bump = min(state.delta + 1, delta_max)

    if isinstance(action, NoOp):
        return [(Idle(bump), 1.0)]

    m = action.server
    p = model.success_prob_per_server[m]
    if isinstance(state, Idle):
        cont = clamp_state(Computing(state.delta + 1, state.delta, m), delta_max)
        if model.tau_min == 0:
            # No warm-up: the fresh task may finish within its offload slot.
            if p >= 1.0:
                return [(Idle(1), 1.0)]
            return [(Idle(1), p), (cont, 1.0 - p)]
        return [(cont, 1.0)]

    cont = clamp_state(Computing(state.delta + 1, state.gen_age, m), delta_max)
    if state.elapsed > model.tau_min or model.tau_min == 0:
        done = Idle(min(state.delta - state.gen_age + 1, delta_max))
        if p >= 1.0:
            return [(done, 1.0)]
        return [(done, p), (cont, 1.0 - p)]
    return [(cont, 1.0)]


def stage_cost(state: UserState, action: Action, nu: np.ndarray | list[float]) -> float:
    """Immediate cost: current age plus the chosen server's activating cost."""
    if isinstance(action, Offload):
        cost = nu[action.server]
        if cost < 0:
            raise ModelError("activating costs must be non-negative")
        return float(state.delta + cost)
    return float(state.delta)


class RngStreams:
    """Named, independently seeded random streams for reproducible sampling."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            key = zlib.crc32(name.encode("utf-8"))
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
            self._streams[name] = np.random.default_rng(ss)
        return self._streams[name]


def sample_transition(
    state: UserState,
    action: Action,
    config: ScenarioConfig,
    user: int,
    rng_stream: np.random.Generator,
) -> UserState:
    """Draw the next state from the transition kernel (one uniform per call)."""
    dist = successor_distribution(state, action, config, user)
    if len(dist) == 1:
        return dist[0][0]
    u = rng_stream.random()
    acc = 0.0
    for s, prob in dist:
        acc += prob
        if u < acc:
            return s
    return dist[-1][0]


def scaled(config: ScenarioConfig, r: int) -> ScenarioConfig:
    """Replicate users and servers r-fold, keeping their ratio constant."""
    if r < 1:
        raise ModelError(f"scale factor must be >= 1, got {r}")
    if config.num_users * r > 10**9 or config.num_servers * r > 10**9:
        raise ModelError("scaled instance too large")
    groups = tuple(
        replace(
            g,
            count=g.count * r,
            success_prob_per_server=tuple(g.success_prob_per_server) * r,
        )
        for g in config.groups
    )
    return replace(
        config,
        num_users=config.num_users * r,
        num_servers=config.num_servers * r,
        groups=groups,
        initial_costs=tuple(config.initial_costs) * r,
        scale=config.scale * r,
    )
