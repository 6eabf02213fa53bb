"""Derived constants and the admissible epsilon range."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphafair.params import EpsilonError, FloatRangeError, derive, validate_epsilon
from conftest import corpus, dense_problem, simplex


def test_hand_computed_constants():
    p = simplex([1.0, 1.0])
    prm = derive(p, 0.1)
    # delta_j = (1/2)(1/(1*4*1)) = 1/8; C = W / sum delta = 2 / (1/4) = 8
    np.testing.assert_allclose(prm.delta, [0.125, 0.125])
    assert prm.C == pytest.approx(8.0)
    kappa = math.log(8.0 * 1 * 1 / (0.1 * 1.0)) / 0.1
    assert prm.kappa == pytest.approx(kappa)
    assert prm.gamma == pytest.approx(0.025)
    assert prm.beta1 == pytest.approx(0.025 / (5 * (kappa + 1)))
    assert prm.beta2 == prm.beta1
    assert prm.tau0 == pytest.approx(math.log(8.0) / prm.beta1)
    assert prm.tau1 == pytest.approx(math.log(2.0) / prm.beta1)
    assert prm.is_log


def test_delta_formulas_by_regime():
    p = dense_problem([[1.0, 2.0], [3.0, 1.0]], weights=[1.0, 4.0])
    n, m, A = 2, 2, 3.0
    for alpha in (0.5, 1.0):
        d = derive(p, 0.05, alpha).delta
        expected = (p.weights / (2 * 4.0)) ** (1 / alpha) * (1 / (m * n * n * A)) ** (1 / alpha)
        np.testing.assert_allclose(d, expected, rtol=1e-12)
    for alpha in (2.0, 5.0):
        d = derive(p, 0.05, alpha).delta
        expected = (p.weights / 8.0) ** (1 / alpha) / (m * n * n * A ** (2 - 1 / alpha))
        np.testing.assert_allclose(d, expected, rtol=1e-12)


def test_step_sizes_by_regime():
    p = simplex([1.0, 2.0, 3.0])
    lo = derive(p, 0.05, 0.5)
    assert lo.beta1 == pytest.approx(lo.gamma / (5 * (lo.kappa + 1)))
    assert lo.beta2 == pytest.approx(lo.beta1 ** 2 / math.log(1 / lo.delta_min))
    hi = derive(p, 0.05, 3.0)
    assert hi.beta1 == pytest.approx(hi.gamma / (5 * (hi.kappa + 3.0)))
    assert hi.beta2 == hi.beta1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.sampled_from([0.3, 0.5, 1.0, 2.0, 6.0]),
       eps=st.sampled_from([0.01, 0.05, 0.1]))
def test_dual_scale_identity_and_step_safety(seed, alpha, eps):
    p = corpus(seed, 1)[0]
    prm = derive(p, eps, alpha)
    # C equals w_j / delta_j^alpha for every agent
    np.testing.assert_allclose(p.weights / prm.delta ** alpha, prm.C, rtol=1e-9)
    up = alpha * math.log1p(prm.beta1) + prm.kappa * prm.beta1
    down = alpha * math.log1p(-prm.beta2) - prm.kappa * prm.beta2
    assert up <= math.log1p(prm.gamma / 4)
    assert down >= math.log1p(-prm.gamma / 4)
    assert np.all(prm.delta < 1)
    assert prm.default_budget() == 50 * math.ceil(prm.tau0 + prm.tau1)


@pytest.mark.parametrize("eps, alpha, label", [
    (0.2, 1.0, "eps <= 1/6"),
    (0.15, 0.9, "\\(1-alpha\\)/alpha"),
    (0.16, 6.0, "9/\\(10\\*alpha\\)"),
    (-0.1, 1.0, "positive"),
])
def test_epsilon_range_errors_name_the_bound(eps, alpha, label):
    with pytest.raises(EpsilonError, match=label):
        validate_epsilon(eps, alpha)


def test_epsilon_clamp():
    assert validate_epsilon(0.2, 1.0, clamp=True) == pytest.approx(1 / 6)
    assert validate_epsilon(0.2, 0.9, clamp=True) == pytest.approx(0.1 / 0.9)
    assert validate_epsilon(0.1, 1.0) == 0.1


def test_float_range_guard():
    # tiny alpha makes delta = (...)^(1/alpha) underflow
    p = dense_problem(np.full((3, 3), 50.0))
    with pytest.raises(FloatRangeError, match="out of float range"):
        derive(p, 0.1, 0.01)


def test_to_dict_is_json_ready():
    import json
    d = derive(simplex([1.0, 2.0]), 0.1).to_dict()
    json.dumps(d)
    assert set(d) >= {"delta", "C", "kappa", "beta1", "beta2", "tau0", "tau1"}
