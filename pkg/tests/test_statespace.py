"""Dense state enumeration must mirror the kernel exactly."""

import numpy as np
import pytest

from aoi_nest.model import Computing, Idle, ModelError, NoOp, Offload, successor_distribution
from aoi_nest.statespace import TruncatedStateSpace

from conftest import tiny_config


def test_size_formula():
    for k in (2, 5, 17, 40):
        sp = TruncatedStateSpace(k)
        assert sp.size == k + k * (k + 1) // 2
        assert sp.num_idle == k


def test_bijective_indexing():
    sp = TruncatedStateSpace(12)
    seen = set()
    for i in range(sp.size):
        s = sp.state_of(i)
        assert sp.index_of(s) == i
        seen.add((type(s).__name__, s.delta, getattr(s, "gen_age", 0)))
    assert len(seen) == sp.size


def test_layer_partition():
    sp = TruncatedStateSpace(9)
    l1, l2 = sp.layer_indices(1), sp.layer_indices(2)
    assert len(l1) + len(l2) == sp.size
    assert all(sp.layer(i) == 1 for i in l1)
    assert all(sp.layer(i) == 2 for i in l2)
    with pytest.raises(ModelError):
        sp.layer_indices(3)


@pytest.mark.parametrize("tau", [0, 1, 2, 5])
@pytest.mark.parametrize("p", [0.3, 0.8, 1.0])
def test_tables_match_kernel(tau, p):
    """Vectorized successor tables agree with successor_distribution everywhere."""
    K = 18
    sp = TruncatedStateSpace(K)
    cfg = tiny_config(tau=tau, p=(p,), truncation=K)
    tables = sp.offload_tables(tau)
    for i in range(sp.size):
        state = sp.state_of(i)
        state = (
            Computing(state.delta, state.gen_age, 0)
            if isinstance(state, Computing)
            else state
        )
        # NoOp
        (s_noop, pr) = successor_distribution(state, NoOp(), cfg, 0)[0]
        assert pr == 1.0 and sp.index_of(s_noop) == sp.noop_next[i]
        # Offload
        dist = {
            (type(s).__name__, s.delta, getattr(s, "gen_age", 0)): pr
            for s, pr in successor_distribution(state, Offload(0), cfg, 0)
        }
        cont = sp.state_of(tables.cont_next[i])
        if tables.eligible[i] and p < 1.0:
            done = sp.state_of(tables.done_next[i])
            assert dist[("Idle", done.delta, 0)] == pytest.approx(p)
            key = ("Computing", cont.delta, cont.gen_age)
            assert dist[key] == pytest.approx(1 - p)
        elif tables.eligible[i]:
            done = sp.state_of(tables.done_next[i])
            assert dist == {("Idle", done.delta, 0): 1.0}
        else:
            key = ("Computing", cont.delta, cont.gen_age)
            assert dist == {key: 1.0}


def test_expected_values_blend():
    sp = TruncatedStateSpace(10)
    v = np.arange(sp.size, dtype=float)
    t = sp.offload_tables(1)
    ev = sp.expected_values(v, 1, 0.25)
    manual = np.where(
        t.eligible, 0.25 * v[t.done_next] + 0.75 * v[t.cont_next], v[t.cont_next]
    )
    assert np.array_equal(ev, manual)
