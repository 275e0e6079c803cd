"""Dense enumeration of the truncated per-user state space.

Layout: idle states first (age 1..delta_max), then computing states ordered
by (delta, gen_age) with 1 <= gen_age <= delta <= delta_max. Server identity
is carried by the action, not the state, so one space serves every server.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import Computing, Idle, ModelError, UserState

__all__ = ["TruncatedStateSpace", "OffloadTables"]


@dataclass(frozen=True)
class OffloadTables:
    """Vectorized successor indices for the offload action at one warm-up value.

    For eligible states the transition splits between ``done_next`` (prob p)
    and ``cont_next`` (prob 1-p); ineligible states move to ``cont_next``
    deterministically.
    """

    eligible: np.ndarray  # bool[S]
    cont_next: np.ndarray  # int[S]
    done_next: np.ndarray  # int[S], meaningful where eligible


class TruncatedStateSpace:
    """Bijective state <-> dense index maps plus vectorized kernel tables."""

    def __init__(self, delta_max: int):
        if delta_max < 2:
            raise ModelError("delta_max must be >= 2")
        self.delta_max = int(delta_max)
        K = self.delta_max
        self.num_idle = K
        self.num_computing = K * (K + 1) // 2
        self.size = self.num_idle + self.num_computing

        # comp_base[d] = index of Computing(d, 1); row d holds gen_age 1..d.
        self._comp_base = np.zeros(K + 2, dtype=np.int64)
        self._comp_base[1] = self.num_idle
        for d in range(2, K + 2):
            self._comp_base[d] = self._comp_base[d - 1] + (d - 1)

        self.delta = np.empty(self.size, dtype=np.int64)
        self.gen_age = np.zeros(self.size, dtype=np.int64)
        self.is_idle = np.zeros(self.size, dtype=bool)
        self.is_idle[: self.num_idle] = True
        self.delta[: self.num_idle] = np.arange(1, K + 1)
        for d in range(1, K + 1):
            base = self._comp_base[d]
            self.delta[base : base + d] = d
            self.gen_age[base : base + d] = np.arange(1, d + 1)
        self.elapsed = np.where(self.is_idle, 0, self.delta - self.gen_age)

        self._noop_next: np.ndarray | None = None
        self._offload: dict[int, OffloadTables] = {}

    # -- index maps ----------------------------------------------------------

    def idle_index(self, delta: int) -> int:
        if not (1 <= delta <= self.delta_max):
            raise ModelError(f"idle age {delta} out of range")
        return delta - 1

    def comp_index(self, delta: int, gen_age: int) -> int:
        if not (1 <= gen_age <= delta <= self.delta_max):
            raise ModelError(f"computing state ({delta}, {gen_age}) out of range")
        return int(self._comp_base[delta]) + gen_age - 1

    def index_of(self, state: UserState) -> int:
        if isinstance(state, Idle):
            return self.idle_index(state.delta)
        return self.comp_index(state.delta, state.gen_age)

    def state_of(self, index: int) -> UserState:
        if not (0 <= index < self.size):
            raise ModelError(f"state index {index} out of range")
        if index < self.num_idle:
            return Idle(index + 1)
        return Computing(int(self.delta[index]), int(self.gen_age[index]))

    def layer(self, index: int) -> int:
        return 1 if index < self.num_idle else 2

    def layer_indices(self, layer: int) -> np.ndarray:
        if layer == 1:
            return np.arange(self.num_idle)
        if layer == 2:
            return np.arange(self.num_idle, self.size)
        raise ModelError(f"layer must be 1 or 2, got {layer}")

    # -- vectorized kernel ----------------------------------------------------

    @property
    def noop_next(self) -> np.ndarray:
        """Successor index under NoOp (drop + age bump) for every state."""
        if self._noop_next is None:
            bumped = np.minimum(self.delta + 1, self.delta_max)
            self._noop_next = bumped - 1  # Idle(bumped)
        return self._noop_next

    def offload_tables(self, tau_min: int) -> OffloadTables:
        """Successor tables for the offload action under warm-up ``tau_min``."""
        if tau_min < 0:
            raise ModelError("tau_min must be >= 0")
        if tau_min in self._offload:
            return self._offload[tau_min]
        K = self.delta_max
        S = self.size
        eligible = np.zeros(S, dtype=bool)
        cont_next = np.empty(S, dtype=np.int64)
        done_next = np.zeros(S, dtype=np.int64)

        # Layer 1: fresh task. Clamp slides gen_age to keep elapsed honest.
        idle_delta = self.delta[: self.num_idle]
        nd = np.minimum(idle_delta + 1, K)
        ng = idle_delta - (idle_delta + 1 - nd)  # = delta, or delta-1 at clamp
        cont_next[: self.num_idle] = self._comp_base[nd] + ng - 1
        if tau_min == 0:
            eligible[: self.num_idle] = True
            done_next[: self.num_idle] = self.idle_index(1)

        # Layer 2: continue (slide at clamp) or complete at elapsed+1.
        lo = self.num_idle
        d2 = self.delta[lo:]
        g2 = self.gen_age[lo:]
        nd2 = np.minimum(d2 + 1, K)
        ng2 = np.maximum(g2 - (d2 + 1 - nd2), 1)
        cont_next[lo:] = self._comp_base[nd2] + ng2 - 1
        elig2 = (d2 - g2 > tau_min) if tau_min >= 1 else np.ones(d2.shape, dtype=bool)
        eligible[lo:] = elig2
        done_next[lo:] = np.where(elig2, d2 - g2 + 1 - 1, 0)  # Idle(elapsed+1)

        tables = OffloadTables(eligible, cont_next, done_next)
        self._offload[tau_min] = tables
        return tables

    def expected_values(
        self, values: np.ndarray, tau_min: int, p: float
    ) -> np.ndarray:
        """E[values(next state)] under offload with success prob ``p``."""
        t = self.offload_tables(tau_min)
        cont = values[t.cont_next]
        done = values[t.done_next]
        return np.where(t.eligible, p * done + (1.0 - p) * cont, cont)


@lru_cache(maxsize=32)
def get_space(delta_max: int) -> TruncatedStateSpace:
    return TruncatedStateSpace(delta_max)
