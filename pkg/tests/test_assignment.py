"""Max-weight matching: exactness against subset-DP, dual certificates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_nest.assignment import max_weight_assignment

from oracles import matching_bruteforce


def check_certificates(W, asg, tol=1e-8):
    """Feasibility + complementary slackness + strong duality."""
    N, M = W.shape
    # matching feasibility
    seen = [m for m in asg.matched_server if m >= 0]
    assert len(seen) == len(set(seen))
    for m, u in enumerate(asg.matched_user):
        if u >= 0:
            assert asg.matched_server[u] == m
    # dual feasibility
    assert np.all(asg.server_duals >= -tol)
    assert np.all(asg.user_duals >= -tol)
    slack = asg.user_duals[:, None] + asg.server_duals[None, :] - W
    assert slack.min() >= -tol
    # complementary slackness
    for n, m in asg.pairs():
        assert abs(asg.user_duals[n] + asg.server_duals[m] - W[n, m]) <= tol
    for m in range(M):
        if asg.server_duals[m] > tol:
            assert asg.matched_user[m] >= 0
    for n in range(N):
        if asg.user_duals[n] > tol:
            assert asg.matched_server[n] >= 0
    # strong duality
    assert asg.user_duals.sum() + asg.server_duals.sum() == pytest.approx(
        asg.objective, abs=tol * (1 + abs(asg.objective))
    )


class TestExamples:
    def test_two_by_two(self):
        W = np.array([[5.0, 1.0], [3.0, 4.0]])
        asg = max_weight_assignment(W)
        assert asg.objective == 9.0
        assert asg.matched_server.tolist() == [0, 1]
        check_certificates(W, asg)

    def test_all_zero_leaves_everything_unmatched(self):
        asg = max_weight_assignment(np.zeros((3, 2)))
        assert asg.objective == 0.0
        assert np.all(asg.matched_server == -1)
        assert np.all(asg.server_duals == 0.0)

    def test_single_pair_strong_duality(self):
        asg = max_weight_assignment(np.array([[2.0]]))
        assert asg.matched_server.tolist() == [0]
        assert asg.objective == 2.0
        assert asg.user_duals[0] + asg.server_duals[0] == pytest.approx(2.0)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            max_weight_assignment(np.array([[-1.0]]))
        with pytest.raises(ValueError):
            max_weight_assignment(np.array([[np.inf]]))
        with pytest.raises(ValueError):
            max_weight_assignment(np.zeros(3))

    def test_empty_dimensions(self):
        asg = max_weight_assignment(np.zeros((0, 4)))
        assert asg.objective == 0.0
        assert asg.server_duals.shape == (4,)


class TestBruteForce:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_subset_dp(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        W = rng.random((n, m)) * 10
        W[rng.random((n, m)) < 0.2] = 0.0  # sprinkle zero-weight pairs
        asg = max_weight_assignment(W)
        import math

        direct = math.fsum(W[u, s] for u, s in asg.pairs())
        assert direct == matching_bruteforce(W) or abs(
            direct - matching_bruteforce(W)
        ) <= 1e-12
        check_certificates(W, asg)

    def test_row_constant_weights_pick_top_rows(self):
        w = np.array([5.0, 1.0, 4.0, 0.0, 2.0])
        W = np.tile(w[:, None], (1, 2))
        asg = max_weight_assignment(W)
        matched_rows = {n for n, _ in asg.pairs()}
        assert matched_rows == {0, 2}
        assert asg.objective == 9.0
        # least duals equal the best unmatched weight on every server
        assert asg.server_duals.tolist() == [2.0, 2.0]


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 6),
    m=st.integers(1, 6),
    seed=st.integers(0, 10_000),
)
def test_certificates_hold_on_random_instances(n, m, seed):
    W = np.random.default_rng(seed).random((n, m)) * 5
    asg = max_weight_assignment(W)
    check_certificates(W, asg)
    assert asg.objective == pytest.approx(matching_bruteforce(W), abs=1e-9)
