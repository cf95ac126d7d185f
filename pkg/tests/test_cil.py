from itertools import combinations

import numpy as np
import pytest

from cilbench import cil
from cilbench.cil import (
    AGEM, EWC, GEM, MAS, SI, ExemplarMemory, FeatureReplay, LwF, Replay, StrategyError,
    distillation, make_strategy, project_multi, project_single,
)
from cilbench.neuralnet import Network, SGD


def central_diff(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b)))


def active_set_oracle(g, refs, margin=0.0):
    """Exact projection by enumerating every active set (small problems only)."""
    R = np.atleast_2d(refs)
    best, best_d = None, np.inf
    for k in range(len(R) + 1):
        for S in combinations(range(len(R)), k):
            if S:
                RS = R[list(S)]
                try:
                    v = np.linalg.solve(RS @ RS.T, margin - RS @ g)
                except np.linalg.LinAlgError:
                    # dependent rows; an independent subset gives the same point
                    continue
                if np.any(v < -1e-12):
                    continue
                cand = g + RS.T @ v
            else:
                cand = g.copy()
            if np.all(R @ cand >= margin - 1e-9):
                d = np.linalg.norm(cand - g)
                if d < best_d:
                    best, best_d = cand, d
    return best


def toy_task(seed, classes, n=40, width=8):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 1.0, size=(n, width))
    y = np.array([classes[i % len(classes)] for i in range(n)])
    return x, y


# -- projection ------------------------------------------------------------------


def test_agem_examples():
    g = project_single([1.0, -1.0], [0.0, 1.0])
    assert np.allclose(g, [1.0, 0.0])
    assert g @ np.array([0.0, 1.0]) == 0
    assert np.array_equal(project_single([1.0, 1.0], [0.0, 1.0]), [1.0, 1.0])
    assert np.array_equal(project_single([1.0, -1.0], [0.0, 0.0]), [1.0, -1.0])


def test_gem_single_constraint_reduces_to_agem():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g, r = rng.standard_normal(6), rng.standard_normal(6)
        np.testing.assert_allclose(project_multi(g, [r]), project_single(g, r), rtol=1e-12, atol=1e-12)


def test_gem_unchanged_when_satisfied():
    g = np.array([1.0, 2.0, 3.0])
    out = project_multi(g, [[1.0, 0, 0], [0, 1.0, 0]])
    assert np.linalg.norm(out - g) == 0


@pytest.mark.parametrize("seed", range(30))
def test_gem_matches_active_set_oracle(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(3, 11))
    k = int(rng.integers(1, 4))
    g = rng.standard_normal(dim)
    refs = rng.standard_normal((k, dim))
    margin = float(rng.choice([0.0, 0.1]))
    got = project_multi(g, refs, margin)
    np.testing.assert_allclose(got, active_set_oracle(g, refs, margin), atol=1e-6)
    assert np.all(refs @ got >= margin - 1e-10)


# -- penalties -------------------------------------------------------------------


def test_quadratic_penalty_examples():
    ewc = EWC(lam=100.0)
    ewc.importance = np.array([1.0, 1.0])
    ewc.anchor = np.array([0.5, -0.5])
    loss, grad = ewc.penalty(np.array([1.5, -0.5]))
    assert loss == pytest.approx(50.0)
    assert np.allclose(grad, [100.0, 0.0])
    assert ewc.penalty(ewc.anchor.copy())[0] == 0.0


def consolidated(strategy, seed=0):
    net = Network((8, 6, 4), seed=seed)
    x, y = toy_task(seed, [0, 1])
    strategy.begin_task(net, [0, 1])
    opt = SGD(0.05, 0.0)
    for _ in range(5):
        old = net.get_flat()
        loss, g = strategy.batch_loss(net, x, y, [0, 1])
        opt.step(net, g)
        strategy.after_step(net, old, g)
    strategy.end_of_task(net, x, y, [0, 1])
    net.set_flat(net.params + 0.1 * np.random.default_rng(seed + 1).standard_normal(net.n_params))
    strategy.begin_task(net, [2, 3])
    return net


@pytest.mark.parametrize("factory", [lambda: EWC(lam=3.0), lambda: MAS(lam=2.0), lambda: SI(c=0.5)])
def test_penalty_gradient_matches_finite_differences(factory):
    strategy = factory()
    net = consolidated(strategy)
    assert np.all(strategy.importance >= 0)
    x, y = toy_task(9, [2, 3])
    _, g = strategy.batch_loss(net, x, y, [0, 1, 2, 3])

    def f(p):
        m = net.copy()
        m.set_flat(p)
        return strategy.batch_loss(m, x, y, [0, 1, 2, 3])[0]

    assert rel_err(g, central_diff(f, net.get_flat())) < 1e-4


def test_lwf_gradient_and_zero_kl_at_old_model():
    strategy = LwF(temperature=2.0, alpha=1.0)
    net = consolidated(strategy)
    x, y = toy_task(4, [2, 3])
    logits = strategy.old_net.forward(x)
    kl, dkl = distillation(logits, logits, [0, 1], 2.0)
    assert kl == pytest.approx(0.0, abs=1e-15) and np.allclose(dkl, 0.0)
    _, g = strategy.batch_loss(net, x, y, [0, 1, 2, 3])

    def f(p):
        m = net.copy()
        m.set_flat(p)
        return strategy.batch_loss(m, x, y, [0, 1, 2, 3])[0]

    assert rel_err(g, central_diff(f, net.get_flat())) < 1e-4


def test_feature_replay_gradient_only_touches_head():
    strategy = FeatureReplay()
    net = consolidated(strategy)
    x, y = toy_task(5, [2, 3])
    base_grad = cil.Strategy.batch_loss(strategy, net, x, y, [0, 1, 2, 3])[1]
    state = strategy.rng.bit_generator.state
    loss, g = strategy.batch_loss(net, x, y, [0, 1, 2, 3])
    body = slice(0, net.head_slice.start)
    np.testing.assert_allclose(g[body], 0.5 * base_grad[body], rtol=1e-12, atol=1e-15)

    def f(p):
        m = net.copy()
        m.set_flat(p)
        strategy.rng.bit_generator.state = state
        return strategy.batch_loss(m, x, y, [0, 1, 2, 3])[0]

    assert rel_err(g, central_diff(f, net.get_flat())) < 1e-4


def test_missing_state_is_a_contract_violation():
    ewc = EWC()
    ewc.tasks_done = 1
    net = Network((8, 6, 4), seed=0)
    x, y = toy_task(0, [2, 3])
    with pytest.raises(StrategyError):
        ewc.batch_loss(net, x, y, [0, 1, 2, 3])


def test_si_accumulator_resets():
    si = SI()
    net = consolidated(si)
    assert np.all(si.omega == 0)


def test_anchor_not_modified_during_training():
    ewc = EWC(lam=1.0)
    net = consolidated(ewc)
    F, anchor = ewc.importance.copy(), ewc.anchor.copy()
    x, y = toy_task(3, [2, 3])
    opt = SGD(0.05, 0.9)
    for _ in range(5):
        _, g = ewc.batch_loss(net, x, y, [0, 1, 2, 3])
        opt.step(net, ewc.transform_gradient(net, g, [0, 1, 2, 3]))
    assert np.array_equal(ewc.importance, F) and np.array_equal(ewc.anchor, anchor)


def test_end_of_task_rejects_empty_data():
    with pytest.raises(StrategyError):
        EWC().end_of_task(Network((8, 4)), np.zeros((0, 8)), np.zeros(0, dtype=int), [0, 1])


# -- memory ------------------------------------------------------------------------


def test_memory_balance_after_each_task():
    mem = ExemplarMemory(100)
    rng = np.random.default_rng(0)
    x, y = toy_task(0, [0, 1], n=200)
    mem.add_task(x, y, 0, rng)
    assert len(mem) == 100 and np.bincount(mem.y).tolist() == [50, 50]
    x2, y2 = toy_task(1, [2, 3], n=200)
    mem.add_task(x2, y2, 1, rng)
    assert np.bincount(mem.y).tolist() == [25, 25, 25, 25]
    mem3 = ExemplarMemory(10)
    mem3.add_task(*toy_task(0, [0, 1, 2], n=30), 0, rng)
    counts = np.bincount(mem3.y)
    assert counts.max() - counts.min() <= 1 and len(mem3) == 10


def test_memory_sample_is_balanced():
    mem = ExemplarMemory(100)
    rng = np.random.default_rng(1)
    mem.add_task(*toy_task(0, [0, 1], n=200), 0, rng)
    idx = mem.sample(32, rng)
    assert np.bincount(mem.y[idx]).tolist() == [16, 16]
    assert len(set(idx.tolist())) == 32


def test_replay_batches_mix_old_and_new_labels():
    strategy = Replay(memory_size=100)
    net = consolidated(strategy)
    assert np.bincount(strategy.memory.y).tolist() == [20, 20]
    x, y = toy_task(2, [2, 3], n=32)
    strategy.batch_loss(net, x, y, [0, 1, 2, 3])
    assert set(strategy.last_batch_labels.tolist()) == {0, 1, 2, 3}


@pytest.mark.parametrize("cls", [GEM, AGEM])
def test_projection_strategies_keep_memory_constraint(cls):
    strategy = cls(memory_size=20)
    net = consolidated(strategy)
    x, y = toy_task(2, [2, 3])
    mask = [0, 1, 2, 3]
    _, g = strategy.batch_loss(net, x, y, mask)
    state = strategy.rng.bit_generator.state
    out = strategy.transform_gradient(net, g, mask)
    if cls is GEM:
        refs = strategy.reference_gradients(net, mask)
    else:
        strategy.rng.bit_generator.state = state
        idx = strategy.memory.sample(strategy.sample_size, strategy.rng)
        refs = [cil.Strategy.batch_loss(strategy, net, strategy.memory.x[idx], strategy.memory.y[idx], mask)[1]]
    for r in refs:
        assert out @ r >= -1e-10


# -- factory -------------------------------------------------------------------------


def test_make_strategy():
    r = make_strategy("replay", memory_size=100)
    assert isinstance(r, Replay) and r.memory.capacity == 100
    assert make_strategy("gem").margin == 0.0
    assert make_strategy("ewc").lam == 100.0
    with pytest.raises(ValueError, match="valid:.*replay"):
        make_strategy("icarl")
    with pytest.raises(ValueError):
        make_strategy("ewc", bogus=1)
    assert set(cil.ALL_METHODS) | {"naive"} == set(cil.STRATEGIES)


def test_gem_memory_strength_floor():
    g = np.array([1.0, -1.0])
    r = np.array([0.0, 1.0])
    out = project_multi(g, [r], floor=0.5)
    # dual variable at least the floor: v = max(0.5, 1.0)
    assert np.allclose(out, [1.0, 0.0])
    out = project_multi(np.array([1.0, -0.2]), [r], floor=0.5)
    assert np.allclose(out, [1.0, 0.3])
    assert np.array_equal(project_multi(np.array([1.0, 1.0]), [r], floor=0.5), [1.0, 1.0])
