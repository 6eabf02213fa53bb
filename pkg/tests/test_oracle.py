"""Reference solvers: closed forms, barrier optimality, max-min, LP."""

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from alphafair.model import max_violation, objective
from alphafair.oracle import (
    barrier_solve,
    exchange_violations,
    kkt_residuals,
    lp_solve,
    max_min_fair,
    random_feasible_points,
    single_constraint_closed_form,
    single_constraint_dual,
)
from alphafair.solver import duality_gap
from conftest import corpus, dense_problem, simplex


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0, 2.0, 5.0])
def test_closed_form_on_simplex_is_weight_power(alpha):
    w = np.array([1.0, 3.0, 0.5])
    x = single_constraint_closed_form(w, np.ones(3), alpha)
    expected = w ** (1 / alpha) / np.sum(w ** (1 / alpha))
    np.testing.assert_allclose(x, expected, rtol=1e-10)


def test_closed_form_with_coefficients_is_tight_and_stationary():
    w = np.array([2.0, 1.0, 4.0])
    a = np.array([1.0, 3.0, 2.0])
    for alpha in (0.5, 1.0, 3.0):
        y = single_constraint_dual(w, a, alpha)
        x = single_constraint_closed_form(w, a, alpha)
        assert a @ x == pytest.approx(1.0, rel=1e-10)
        np.testing.assert_allclose(x ** alpha * y * a / w, 1.0, rtol=1e-10)


def test_single_constraint_dual_rejects_bad_input():
    with pytest.raises(ValueError):
        single_constraint_dual([1.0, 2.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        single_constraint_dual([1.0, 2.0], [1.0, 0.0], 1.0)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 5.0])
def test_barrier_matches_closed_form(alpha):
    p = simplex([1.0, 3.0], alpha)
    sol = barrier_solve(p)
    assert sol.converged
    np.testing.assert_allclose(sol.x_star, single_constraint_closed_form([1, 3], [1, 1], alpha),
                               rtol=1e-8)


def test_barrier_symmetric_two_rows():
    p = dense_problem([[1, 1, 0], [0, 1, 1]], alpha=2.0)
    sol = barrier_solve(p)
    # x1 = x3 = 1 - x2 and stationarity gives x2 = sqrt(2) - 1 at alpha = 2
    np.testing.assert_allclose(sol.x_star, [2 - np.sqrt(2), np.sqrt(2) - 1, 2 - np.sqrt(2)],
                               rtol=1e-9)


@pytest.mark.parametrize("alpha", [0.005, 0.5, 1.0, 1.0 - 5e-6, 2.0, 5.0, 20.0, 44.0])
def test_barrier_certifies_random_instances(alpha):
    for p in corpus(3, 6, n_max=10, m_max=6):
        sol = barrier_solve(p, alpha)
        assert sol.converged, sol.info
        assert sol.kkt_residual <= 1e-8
        assert max_violation(p, sol.x_star) <= 0.0
        assert np.all(sol.y_star >= 0)
        gap = duality_gap(p, sol.x_star, sol.y_star, alpha)
        assert abs(gap) <= 1e-7 * max(1.0, abs(objective(p, sol.x_star, alpha)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.sampled_from([0.5, 1.0, 2.0]))
def test_barrier_beats_random_feasible_points(seed, alpha):
    rng = np.random.default_rng(seed)
    p = corpus(seed, 1, n_max=6, m_max=4)[0]
    sol = barrier_solve(p, alpha)
    best = objective(p, sol.x_star, alpha)
    pts = np.vstack([random_feasible_points(p, rng, 50),
                     random_feasible_points(p, rng, 50, around=sol.x_star, spread=0.05)])
    pts = pts[(pts > 0).all(axis=1)]
    vals = [objective(p, z, alpha) for z in pts]
    assert max(vals) <= best + 1e-9 * abs(best)


def test_kkt_residuals_detect_suboptimal_point():
    p = simplex([1.0, 3.0])
    res = kkt_residuals(p, [0.5, 0.5], [4.0], 1.0)
    assert res["gradient"] > 0.4
    assert res["primal"] == 0.0


def test_barrier_size_and_tolerance_guards():
    p = simplex(np.ones(201))
    with pytest.raises(ValueError, match="limited"):
        barrier_solve(p)
    with pytest.raises(ValueError, match="tol"):
        barrier_solve(simplex([1.0, 1.0]), tol=1e-12)


def test_max_min_fair_examples():
    np.testing.assert_allclose(max_min_fair(dense_problem([[1, 1, 0], [0, 1, 1]])), [0.5] * 3)
    # bottleneck first freezes x1, x2 at 1/3; x3 then fills its own row
    z = max_min_fair(dense_problem([[1, 2, 0], [0, 1, 1]]))
    np.testing.assert_allclose(z, [1 / 3, 1 / 3, 2 / 3])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_max_min_fair_admits_no_exchange(seed):
    rng = np.random.default_rng(seed)
    p = corpus(seed, 1, n_max=8, m_max=5)[0]
    z = max_min_fair(p)
    assert max_violation(p, z) <= 1e-12
    cands = np.vstack([random_feasible_points(p, rng, 200),
                       random_feasible_points(p, rng, 200, around=z, spread=0.1)])
    assert not exchange_violations(z, cands).any()


def test_exchange_violations_flags_a_pareto_improvement():
    z = np.array([0.5, 0.5])
    assert exchange_violations(z, [[0.6, 0.5], [0.6, 0.4], [0.4, 0.6]]).tolist() == \
        [True, False, False]


def test_lp_matches_linprog():
    for p in corpus(7, 10, n_max=8, m_max=6):
        z, val = lp_solve(p)
        ref = scipy.optimize.linprog(-p.weights, A_ub=p.dense(), b_ub=np.ones(p.m),
                                     bounds=(0, None), method="highs")
        assert val == pytest.approx(-ref.fun, rel=1e-9)
        assert max_violation(p, z) <= 1e-9
        assert p.weights @ z == pytest.approx(val, rel=1e-12)


def test_lp_scale_guard():
    with pytest.raises(ValueError, match="scale guard"):
        lp_solve(simplex(np.ones(13)))
