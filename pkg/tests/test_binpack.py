import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cilbench.binpack import (
    Instance, Packing, PackingError, Solver, falkenauer, fast_margin, fast_scores,
    label, score_all, solve,
)

BF, FF, NF, WF = Solver.BF, Solver.FF, Solver.NF, Solver.WF

items_st = st.lists(st.integers(20, 100), min_size=1, max_size=120)


def test_solver_index_is_fixed():
    assert [s.name for s in Solver] == ["BF", "FF", "NF", "WF"]
    assert [int(s) for s in Solver] == [0, 1, 2, 3]


@pytest.mark.parametrize("solver, items, fills", [
    (FF, [100, 60, 60, 40], (140, 120)),
    (NF, [100, 60, 60, 40], (100, 120, 40)),
    (WF, [100, 90, 30, 50], (150, 120)),
    (FF, [100, 90, 30, 50], (130, 140)),
    (FF, [70], (70,)),
])
def test_hand_traced_packings(solver, items, fills):
    assert solve(solver, items, 150).fills == fills


def test_instance_objects_are_accepted():
    inst = Instance("a", (100, 60, 60, 40))
    assert solve(FF, inst, 150).fills == (140, 120)


def test_oversized_item_names_index():
    with pytest.raises(PackingError, match="item 2"):
        solve(FF, [10, 20, 151], 150)


@pytest.mark.parametrize("fills, expected", [
    ((150, 150), 1.0),
    ((140, 120), 0.755556),
    ((100, 120, 40), 0.385185),
])
def test_falkenauer_examples(fills, expected):
    assert falkenauer(Packing(fills, 150)) == pytest.approx(expected, abs=1e-6)


def test_falkenauer_empty_rejected():
    with pytest.raises(PackingError):
        falkenauer(Packing((), 150))


def test_score_all_examples():
    s = score_all([100, 90, 30, 50], 150)
    assert s[FF] == pytest.approx(0.811111, abs=1e-6)
    assert s[BF] == pytest.approx(0.811111, abs=1e-6)
    assert s[NF] == pytest.approx(0.398519, abs=1e-6)
    assert s[WF] == pytest.approx(0.82, abs=1e-6)
    assert len(set(score_all([70], 150).values())) == 1
    s = score_all([100, 60, 60, 40], 150)
    assert s[FF] == pytest.approx(0.755556, abs=1e-6)
    assert s[NF] == pytest.approx(0.385185, abs=1e-6)


@pytest.mark.parametrize("items, winner", [
    ([100, 90, 30, 50], WF),
    ([70], BF),
    ([100, 60, 60, 40], BF),
])
def test_label_examples(items, winner):
    assert label(items, 150)[0] == winner


def replay_check(solver, items, packing, capacity):
    """Independent re-simulation of every placement decision."""
    fills = []
    for s, j in zip(items, packing.placement):
        feasible = [b for b, f in enumerate(fills) if f + s <= capacity]
        if j == len(fills):
            if solver == NF:
                assert not fills or fills[-1] + s > capacity
            else:
                assert not feasible
            fills.append(s)
            continue
        assert j in feasible
        res = [capacity - fills[b] - s for b in feasible]
        if solver == FF:
            assert j == feasible[0]
        elif solver == BF:
            assert capacity - fills[j] - s == min(res)
            assert j == feasible[res.index(min(res))]
        elif solver == WF:
            assert capacity - fills[j] - s == max(res)
            assert j == feasible[res.index(max(res))]
        else:
            assert j == len(fills) - 1
        fills[j] += s
    assert tuple(fills) == packing.fills


@settings(max_examples=300, deadline=None)
@given(items_st, st.sampled_from(list(Solver)))
def test_rule_replay_conservation_feasibility(items, solver):
    p = solve(solver, items, 150)
    assert sum(p.fills) == sum(items)
    assert all(0 < f <= 150 for f in p.fills)
    assert len(p.fills) >= math.ceil(sum(items) / 150)
    replay_check(solver, items, p, 150)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 150), min_size=1, max_size=60))
def test_falkenauer_bounds(fills):
    score = falkenauer(Packing(tuple(fills), 150))
    assert 0 < score <= 1
    assert (score == 1) == all(f == 150 for f in fills)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 149), st.data(), st.lists(st.integers(1, 150), max_size=40))
def test_merging_bins_raises_score(a, data, rest):
    b = data.draw(st.integers(1, 150 - a))
    before = falkenauer(Packing((a, b, *rest), 150))
    after = falkenauer(Packing((a + b, *rest), 150))
    assert after > before


def test_determinism():
    rng = np.random.default_rng(1)
    items = rng.integers(20, 101, 120).tolist()
    assert [solve(s, items) for s in Solver] == [solve(s, items) for s in Solver]
    assert score_all(items) == score_all(items)


def test_compiled_scorer_matches_reference_bitwise():
    rng = np.random.default_rng(2)
    for _ in range(500):
        items = rng.integers(20, 101, 120)
        ref = score_all(items.tolist())
        fast = fast_scores(items)
        assert [ref[s] for s in Solver] == fast.tolist()


def test_evolved_wf_margin():
    assert fast_margin([100, 90, 30, 50], WF, 150) == pytest.approx(0.82 - 0.811111, abs=1e-6)
    assert fast_margin([100, 90, 30, 50], WF, 150) > 0
