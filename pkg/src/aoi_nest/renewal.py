"""Closed-form renewal evaluation of single-server threshold policies.

For a user whose success probability is server independent, the decoupled
subproblem collapses to a single effective server at the cheapest current
cost. The policies considered offload once idle age reaches ``H`` and abandon
an in-flight task once its elapsed compute time reaches ``cutoff`` (one idle
slot, then re-offload). Cycle statistics are exact geometric sums, so a full
(H, cutoff) grid evaluates in microseconds; the family minimum slightly
overestimates the true optimum when age-dependent abandonment would help, so
anything that must certify a bound re-evaluates with the exact solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RenewalSolution", "gamma_policy", "optimize_single_server"]


@dataclass(frozen=True)
class RenewalSolution:
    gamma: float
    threshold: int
    cutoff: int  # elapsed compute time at which the task is abandoned
    usage: float  # long-run fraction of slots occupying a server
    mean_cycle: float


def _first_completable(tau_min: int) -> int:
    # Active slot index (1-based) whose transition may complete the task.
    return 1 if tau_min == 0 else tau_min + 2


def _attempt_pmf(tau_min: int, p: float, cutoff: int) -> tuple[np.ndarray, float]:
    """PMF over the completing slot j in [j0, cutoff], plus failure mass."""
    j0 = _first_completable(tau_min)
    if cutoff < j0:
        raise ValueError(f"cutoff {cutoff} below first completable slot {j0}")
    n = cutoff - j0 + 1
    q = 1.0 - p
    pmf = p * q ** np.arange(n)
    fail = q**n
    return pmf, float(fail)


def _cycle_stats(tau_min: int, p: float, nu: float, cutoff: int, h_max: int):
    """Vector over H=1..h_max of (E age sum + nu*active, E length, E active)."""
    j0 = _first_completable(tau_min)
    pmf, fail = _attempt_pmf(tau_min, p, cutoff)
    cond = pmf / (1.0 - fail)
    j = np.arange(j0, cutoff + 1, dtype=np.float64)
    ej = float(cond @ j)
    ejj1 = float(cond @ (j * (j - 1.0)))

    # Post-completion age Y has the same conditional law as the success slot.
    # Prefix sums give every threshold's expectations in one pass.
    cum0 = np.concatenate(([0.0], np.cumsum(cond)))
    cum1 = np.concatenate(([0.0], np.cumsum(cond * j)))
    cum2 = np.concatenate(([0.0], np.cumsum(cond * j * j)))
    Hs = np.arange(1, h_max + 1, dtype=np.float64)
    pos = np.clip(np.arange(1, h_max + 1) - j0, 0, j.size)  # #{support < H}
    f_low = cum0[pos]
    s1_low = cum1[pos]
    s2_low = cum2[pos]
    # E[max(Y,H)] = H P(Y<H) + E[Y; Y>=H]
    e_a1 = Hs * f_low + (ej - s1_low)
    # E[(H-Y)+] and E[(H-Y)(H+Y-1)/2; Y<H] = ((H^2-H) P - (S2_low - S1_low))/2
    e_walk_len = Hs * f_low - s1_low
    e_walk_sum = 0.5 * ((Hs * Hs - Hs) * f_low - (s2_low - s1_low))

    beta = cutoff + 1.0
    e_n = fail / (1.0 - fail)
    e_nn1 = 2.0 * fail**2 / (1.0 - fail) ** 2

    fail_ages = beta * e_a1 * e_n + beta**2 * e_nn1 / 2.0 + cutoff * beta / 2.0 * e_n
    succ_ages = ej * e_a1 + beta * ej * e_n + ejj1 / 2.0
    age_sum = e_walk_sum + fail_ages + succ_ages
    active = cutoff * e_n + ej  # H-independent scalar
    length = e_walk_len + beta * e_n + ej
    return age_sum + nu * active, length, float(active)


def gamma_policy(
    tau_min: int, p: float, nu: float, threshold: int, cutoff: int
) -> float:
    """Exact long-run average cost of one (threshold, cutoff) policy."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    cost, length, _ = _cycle_stats(tau_min, p, nu, cutoff, threshold)
    return float(cost[threshold - 1] / length[threshold - 1])


def optimize_single_server(
    tau_min: int, p: float, nu: float, h_cap: int | None = None
) -> RenewalSolution:
    """Best (threshold, cutoff) policy for one effective server at cost ``nu``."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"success probability {p} outside (0, 1]")
    if nu < 0:
        raise ValueError("nu must be non-negative")
    j0 = _first_completable(tau_min)
    if h_cap is None:
        h_cap = int(2.5 * (j0 + 1.0 / p) + 3.0 * np.sqrt(2.0 * max(nu, 1.0)) + 12)

    def scan(cutoffs, cap):
        best = None
        for c in cutoffs:
            cost, length, active = _cycle_stats(tau_min, p, nu, c, cap)
            gam = cost / length
            i = int(np.argmin(gam))
            if best is None or gam[i] < best[0]:
                best = (
                    float(gam[i]),
                    i + 1,
                    c,
                    active / float(length[i]),
                    float(length[i]),
                )
        return best

    # Never-drop is approximated by a cutoff whose failure mass underflows
    # double precision, so the grid needs no open-ended extension.
    c_never = j0 + (0 if p >= 1.0 else int(np.ceil(45.0 / p)))
    c_hi = j0 + max(4, int(np.ceil(8.0 / p)))
    while True:
        coarse = sorted(
            {j0 + int(round(x)) for x in np.geomspace(1, c_hi - j0 + 1, 10)}
            | {c_never}
        )
        best = scan(coarse, h_cap)
        if best[2] != c_never:
            best = scan(range(max(j0, best[2] - 2), best[2] + 3), h_cap)
        if best[1] >= h_cap:
            h_cap *= 2
            continue
        return RenewalSolution(*best)
