import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cardlab import transport as tr

from oracles import brute_force_w2


def clouds(n_max=6, d=2):
    return st.integers(1, n_max).flatmap(
        lambda n: st.tuples(*(arrays(np.float64, (n, d), elements=st.floats(-10, 10))
                              for _ in range(2))))


def test_identical_sets_are_zero(rng):
    a = rng.normal(size=(30, 2))
    dist, cpl = tr.w2_exact(a, a)
    assert dist == 0.0 and np.array_equal(cpl.permutation, np.arange(30))
    assert tr.brute_force_w2(a[:6], a[:6]) == 0.0


def test_single_point():
    assert tr.w2_exact([[0.0, 0.0]], [[3.0, 4.0]])[0] == 5.0


def test_unequal_sizes_rejected():
    with pytest.raises(ValueError):
        tr.w2_exact(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        tr.brute_force_w2(np.zeros((9, 2)), np.zeros((9, 2)))


def test_crossing_assignment_beats_greedy():
    # greedy would pair a0 with its nearest b0 and leave a costly leftover
    a = np.array([[0.0, 0.0], [2.0, 0.0]])
    b = np.array([[1.0, 0.0], [3.5, 0.0]])
    # identity: (1 + 2.25)/2; swap: (12.25 + 1)/2
    assert tr.brute_force_w2(a, b) == pytest.approx(math.sqrt(1.625))
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.9, 0.0], [-0.2, 0.0]])
    # nearest-first picks (a1,b0) then (a0,b1); optimum is the crossing (a0,b1),(a1,b0)
    assert tr.brute_force_w2(a, b) == pytest.approx(math.sqrt((0.04 + 0.01) / 2))


def test_colinear_shift():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    v = np.array([0.3, -0.4])
    assert tr.brute_force_w2(a, a + v) == pytest.approx(0.5, abs=1e-15)
    assert tr.w2_exact(a, a + v)[0] == pytest.approx(0.5, abs=1e-15)


def test_exact_equals_brute_force_on_random_instances(rng):
    for _ in range(200):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) * 2
        assert tr.w2_exact(a, b)[0] == tr.brute_force_w2(a, b)
        assert tr.w2_exact(a, b)[0] == pytest.approx(brute_force_w2(a, b), rel=1e-12)


@given(clouds())
def test_exact_matches_permutation_oracle(pair):
    a, b = pair
    assert tr.w2_exact(a, b)[0] == pytest.approx(brute_force_w2(a, b), rel=1e-12, abs=1e-12)


@given(clouds(5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-4, 4))
def test_metric_properties(pair, vx, vy, c):
    a, b = pair
    d = tr.w2_exact(a, b)[0]
    assert abs(d - tr.w2_exact(b, a)[0]) <= 1e-10
    v = np.array([vx, vy])
    assert abs(tr.w2_exact(a + v, b + v)[0] - d) <= 1e-10 * max(1.0, d)
    assert abs(tr.w2_exact(c * a, c * b)[0] - abs(c) * d) <= 1e-10 * max(1.0, abs(c) * d)


def test_triangle_inequality(rng):
    for _ in range(100):
        n = int(rng.integers(1, 30))
        a, b, c = (rng.normal(size=(n, 2)) * rng.uniform(0.1, 3) for _ in range(3))
        ab, bc, ac = (tr.w2_exact(p, q)[0] for p, q in [(a, b), (b, c), (a, c)])
        assert ac <= ab + bc + 1e-8


def test_exact_beats_random_permutations(rng):
    for _ in range(10):
        n = 25
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        dist, cpl = tr.w2_exact(a, b)
        assert sorted(cpl.permutation) == list(range(n))
        C = tr.sq_cost(a, b)
        for _ in range(100):
            p = rng.permutation(n)
            assert cpl.transport_cost <= C[np.arange(n), p].mean() + 1e-12


def test_sinkhorn_close_to_exact_on_gaussian_clouds(rng):
    a, b = rng.normal(size=(200, 2)), rng.normal(size=(200, 2)) * 1.5 + 0.5
    exact = tr.w2_exact(a, b)[0]
    res = tr.w2_sinkhorn(a, b)
    assert res.converged
    assert abs(res.distance - exact) <= 0.02 * exact
    plan = res.coupling.plan
    np.testing.assert_allclose(plan.sum(axis=0), 1 / 200, atol=1e-8)
    np.testing.assert_allclose(plan.sum(axis=1), 1 / 200, atol=1e-8)


def test_sinkhorn_gap_shrinks_with_regularisation(rng):
    for _ in range(10):
        a, b = rng.normal(size=(40, 2)), rng.normal(size=(40, 2)) + 0.3
        exact = tr.w2_exact(a, b)[0]
        med = float(np.median(tr.sq_cost(a, b)))
        gaps = [tr.w2_sinkhorn(a, b, reg_eps=r * med).distance - exact
                for r in (0.5, 0.2, 0.05, 0.01)]
        assert all(g >= -1e-9 for g in gaps)
        assert all(x >= y - 1e-9 for x, y in zip(gaps, gaps[1:]))


def test_sinkhorn_self_distance_vanishes(rng):
    a = rng.normal(size=(50, 2))
    med = float(np.median(tr.sq_cost(a, a)))
    regs = [r * med for r in (0.1, 0.01, 0.001)]
    d = [tr.w2_sinkhorn(a, a, reg_eps=r).distance for r in regs]
    assert d[0] > d[1] > d[2]
    # the Gibbs kernel spreads mass with E|x - y|^2 of about reg_eps in two dimensions
    assert all(x ** 2 <= r for x, r in zip(d, regs))


def test_rounding_gives_exact_marginals(rng):
    plan = rng.uniform(size=(7, 7)) / 49
    r = np.full(7, 1 / 7)
    P = tr.round_to_marginals(plan, r, r)
    assert (P >= 0).all()
    np.testing.assert_allclose(P.sum(axis=0), r, atol=1e-15)
    np.testing.assert_allclose(P.sum(axis=1), r, atol=1e-15)
    assert np.abs(P - plan).sum() <= 2 * np.abs(plan.sum(axis=1) - r).sum() + 2 * np.abs(plan.sum(axis=0) - r).sum()


def test_sinkhorn_flags_non_convergence(rng):
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    res = tr.w2_sinkhorn(a, b, reg_eps=1e-3 * float(np.median(tr.sq_cost(a, b))), max_iters=3,
                         tol=1e-15)
    assert not res.converged and res.iterations == 3
    with pytest.raises(ValueError):
        tr.w2_sinkhorn(a, b, reg_eps=0.0)


def test_quantile_1d_matches_exact(rng):
    a, b = rng.normal(size=100), rng.exponential(size=100)
    assert tr.w2_quantile_1d(a, b) == pytest.approx(tr.w2_exact(a, b)[0], rel=1e-12)
