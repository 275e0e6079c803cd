"""Nested index: bisection semantics, closed forms, precise division."""

import numpy as np
import pytest

from aoi_nest.index_policy import (
    BracketCapExceeded,
    bisect_indices,
    gamma_star_closed_form,
    index_by_bisection,
    index_closed_form,
    index_closed_form_fixed_point,
    precise_division_check,
    predecessor_costs,
    server_order,
)
from aoi_nest.model import Computing, Idle, ModelError, UserModel
from aoi_nest.solver import relative_value_iteration
from aoi_nest.statespace import TruncatedStateSpace

from oracles import cycle_gamma


class TestServerOrder:
    def test_orders_by_p_then_cost(self):
        user = UserModel(0, (0.8, 0.5, 0.8))
        assert server_order(user, [1.0, 9.0, 0.5]) == [1, 2, 0]

    def test_predecessor_is_previous_band_cheapest(self):
        user = UserModel(0, (0.5, 0.8, 0.8))
        pred = predecessor_costs(user, [2.0, 1.0, 0.4])
        # both fast servers reference the slow band's cost; slow references 0
        assert pred.tolist() == [0.0, 2.0, 2.0]

    def test_equal_p_band_shares_zero_reference(self):
        user = UserModel(0, (0.6, 0.6, 0.6))
        pred = predecessor_costs(user, [5.0, 1.0, 3.0])
        assert pred.tolist() == [0.0, 0.0, 0.0]


class TestBisection:
    def test_deep_passive_state_has_zero_index(self):
        # the free faster server dominates the slow one at every state, so
        # the slow server is passive already at cost zero
        user = UserModel(0, (0.5, 0.8))
        space = TruncatedStateSpace(25)
        val = index_by_bisection(user, Idle(5), 0, [0.5, 0.0], space)
        assert val == 0.0

    def test_single_server_crossing_matches_analytic(self):
        # p=1, no warm-up: idle age A becomes the activation boundary exactly
        # when the cycle costs tie: gamma(A) == gamma(A+1), i.e. nu = A(A+1)/2.
        user = UserModel(0, (1.0,))
        space = TruncatedStateSpace(30)
        for A in (3, 5, 7):
            nu_cross = A * (A + 1) / 2
            got = index_by_bisection(user, space.idle_index(A), 0, [3.0], space, tol=1e-7)
            assert got == pytest.approx(nu_cross, abs=1e-5)
            assert cycle_gamma(A, nu_cross) == pytest.approx(cycle_gamma(A + 1, nu_cross))

    def test_monotone_in_age(self):
        # urgency grows with age: along idle states, and along layer-2 states
        # at fixed elapsed compute time (fixed staleness)
        user = UserModel(0, (0.5, 0.8))
        space = TruncatedStateSpace(25)
        idle_idx = [space.idle_index(a) for a in (3, 6, 9, 12)]
        vals = bisect_indices(user, idle_idx, 1, [0.6, 1.5], space, tol=1e-5)
        assert np.all(np.diff(vals) >= -1e-5)
        elapsed2 = [space.comp_index(d + 2, d) for d in (4, 7, 10, 13)]
        vals2 = bisect_indices(user, elapsed2, 1, [0.6, 1.5], space, tol=1e-5)
        assert np.all(np.diff(vals2) >= -1e-5)

    def test_bracket_cap_reported(self):
        # a same-probability competitor at enormous cost never overtakes, so
        # the passive crossing exceeds any bracket
        user = UserModel(0, (0.5, 0.5))
        space = TruncatedStateSpace(12)
        with pytest.raises(BracketCapExceeded):
            index_by_bisection(
                user, Idle(11), 0, [0.0, 1e9], space, bracket_hi=1.0
            )


class TestClosedFormGamma:
    def test_analytic_instances(self):
        user = UserModel(0, (1.0,))
        space = TruncatedStateSpace(40)
        assert gamma_star_closed_form(user, [3.0], space) == pytest.approx(3.0, abs=1e-9)
        assert gamma_star_closed_form(user, [0.0], space) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize(
        "p,nu",
        [
            ((0.5, 0.8), (0.7, 2.2)),
            ((0.5, 0.8), (1.5, 4.0)),
            ((0.4, 0.6), (0.0, 1.0)),
            ((0.35, 0.5, 0.75), (0.4, 1.1, 2.7)),
        ],
    )
    def test_matches_rvi(self, p, nu):
        user = UserModel(0, tuple(p))
        space = TruncatedStateSpace(60)
        cf = gamma_star_closed_form(user, list(nu), space)
        rvi = relative_value_iteration(user, list(nu), space).gamma_star
        assert cf == pytest.approx(rvi, abs=1e-6)

    def test_requires_no_warmup_regime(self):
        user = UserModel(2, (0.5,))
        space = TruncatedStateSpace(30)
        with pytest.raises(ModelError):
            gamma_star_closed_form(user, [1.0], space)

    def test_supplied_thresholds_evaluate_exactly(self):
        user = UserModel(0, (1.0,))
        space = TruncatedStateSpace(30)
        g = gamma_star_closed_form(user, [3.0], space, thresholds={0: 2, "cutoff": 1})
        assert g == pytest.approx(3.0)
        g4 = gamma_star_closed_form(user, [3.0], space, thresholds={0: 4, "cutoff": 1})
        assert g4 == pytest.approx(cycle_gamma(4, 3.0))


class TestClosedFormIndex:
    def test_formula_example(self):
        user = UserModel(0, (0.5, 0.8))
        out = index_closed_form(user, Idle(5), 1, [2.0, 1.0], 3.0)
        assert out.value == 4.0
        assert not out.used_noop_reference

    def test_clamps_at_zero(self):
        user = UserModel(0, (0.5, 0.8))
        out = index_closed_form(user, Idle(1), 0, [0.0, 1.0], 3.0)
        assert out.value == 0.0
        assert out.used_noop_reference

    def test_state_index_form(self):
        user = UserModel(0, (0.5, 0.8))
        space = TruncatedStateSpace(20)
        a = index_closed_form(user, Computing(8, 3), 1, [1.0, 0.5], 2.0)
        b = index_closed_form(user, space.comp_index(8, 3), 1, [1.0, 0.5], 2.0, space)
        assert a == b

    def test_fixed_point_converges_and_is_consistent(self):
        user = UserModel(0, (0.5, 0.8))
        space = TruncatedStateSpace(40)
        gamma_fn = lambda nuv: gamma_star_closed_form(user, nuv, space)
        nu = [0.8, 2.0]
        z = index_closed_form_fixed_point(user, Idle(11), 1, nu, gamma_fn)
        probe = np.array(nu)
        probe[1] = z
        expect = max(0.0, predecessor_costs(user, probe)[1] + 11 - gamma_fn(probe))
        assert z == pytest.approx(expect, abs=1e-7)


class TestPreciseDivision:
    def _solved(self):
        user = UserModel(0, (0.5, 0.8))
        space = TruncatedStateSpace(25)
        nu = np.array([0.7, 1.8])
        sol = relative_value_iteration(user, nu, space)
        return user, space, nu, sol

    def test_bisection_index_classifies_optimality(self):
        user, space, nu, sol = self._solved()
        rng = np.random.default_rng(0)
        sample = rng.choice(space.size, size=60, replace=False)
        caches = {}

        def index_fn(si, m):
            if m not in caches:
                caches[m] = {}
            if si not in caches[m]:
                caches[m][si] = index_by_bisection(user, int(si), m, nu, space, tol=1e-7)
            return caches[m][si]

        report = precise_division_check(user, nu, sample, sol, index_fn, tol=1e-5)
        assert report.passed, report.violations[:8]

    def test_single_server_third_clause_vacuous(self):
        user = UserModel(0, (0.7,))
        space = TruncatedStateSpace(15)
        nu = np.array([1.0])
        sol = relative_value_iteration(user, nu, space)

        def index_fn(si, m):
            return index_by_bisection(user, int(si), m, nu, space, tol=1e-7)

        report = precise_division_check(
            user, nu, space.layer_indices(1)[:10], sol, index_fn, tol=1e-5
        )
        assert report.passed, report.violations[:8]
