"""Maximum-weight bipartite assignment with exact LP duals.

The per-slot scheduling problem matches users to servers to maximize the
summed index weights, at most one user per server and one server per user.
Zero-weight pairs are never matched. Server duals are the pointwise-least
non-negative potentials satisfying complementary slackness with the optimal
matching; they price each server's capacity and drive the cost update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["Assignment", "max_weight_assignment"]

_EPS = 1e-12


@dataclass
class Assignment:
    """Optimal partial matching plus dual certificates."""

    matched_server: np.ndarray  # int[N], -1 if unmatched
    matched_user: np.ndarray  # int[M], -1 if unmatched
    server_duals: np.ndarray  # float[M] >= 0
    user_duals: np.ndarray  # float[N] >= 0
    objective: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(n, int(m)) for n, m in enumerate(self.matched_server) if m >= 0]


def _least_server_duals(W: np.ndarray, matched_server: np.ndarray) -> np.ndarray:
    """Least non-negative duals satisfying complementary slackness.

    Feasibility requires lam_n + nu_m >= w_nm with lam_n = 0 for unmatched
    users and lam_n = w_{n,m(n)} - nu_{m(n)} for matched ones. Eliminating
    lam leaves lower bounds and difference constraints on nu whose least
    fixpoint is reached by Bellman-Ford style passes (the constraint graph of
    an optimal matching has no positive cycles, so this terminates).
    """
    N, M = W.shape
    nu = np.zeros(M)
    unmatched = matched_server < 0
    if unmatched.any():
        nu = np.maximum(nu, W[unmatched].max(axis=0, initial=0.0))
    rows = np.nonzero(~unmatched)[0]
    if rows.size == 0:
        return nu
    w_match = W[rows, matched_server[rows]]
    delta = W[rows] - w_match[:, None]  # nu_m >= nu_{m(n)} + delta[n, m]
    tol = _EPS * (1.0 + float(np.abs(W).max()))
    for _ in range(M + 2):
        cand = (nu[matched_server[rows]][:, None] + delta).max(axis=0)
        new = np.maximum(nu, cand)
        if np.all(new <= nu + tol):
            return new
        nu = new
    raise RuntimeError("dual propagation failed to converge")


def max_weight_assignment(weights: np.ndarray) -> Assignment:
    """Solve the slot scheduling problem exactly.

    Weights must be non-negative and finite. Returns the matching, its
    objective, and optimal duals of the LP relaxation (integral for
    matching polytopes), normalized so unmatched servers carry dual zero.
    """
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    N, M = W.shape
    if N == 0 or M == 0:
        return Assignment(
            np.full(N, -1, dtype=np.int64),
            np.full(M, -1, dtype=np.int64),
            np.zeros(M),
            np.zeros(N),
            0.0,
        )
    if not np.all(np.isfinite(W)) or np.any(W < 0):
        raise ValueError("weights must be finite and non-negative")

    rows, cols = linear_sum_assignment(W, maximize=True)
    matched_server = np.full(N, -1, dtype=np.int64)
    matched_user = np.full(M, -1, dtype=np.int64)
    for r, c in zip(rows, cols):
        if W[r, c] > 0.0:  # zero-weight pairs are left unmatched
            matched_server[r] = c
            matched_user[c] = r

    nu = _least_server_duals(W, matched_server)
    lam = np.zeros(N)
    matched = matched_server >= 0
    lam[matched] = W[matched, matched_server[matched]] - nu[matched_server[matched]]
    lam = np.maximum(lam, 0.0)

    objective = float(sum(W[n, m] for n, m in enumerate(matched_server) if m >= 0))
    return Assignment(matched_server, matched_user, nu, lam, objective)
