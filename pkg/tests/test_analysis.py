"""Structural checks against reference optima."""

import numpy as np
import pytest

from alphafair.analysis import (
    LEMMA_COLUMNS,
    check_lower_bound,
    check_lp_approx,
    check_mmf_limit,
    check_near_one_transfer,
    lower_bounds,
    mmf_alpha,
    reports_to_csv_text,
    run_check,
    write_reports,
)
from alphafair.oracle import OracleSolution
from conftest import corpus, dense_problem, simplex


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_lower_bound_is_tight_on_symmetric_simplex(alpha):
    p = simplex([1.0, 1.0], alpha)
    np.testing.assert_allclose(lower_bounds(p, alpha), [0.5, 0.5])
    rep = check_lower_bound(p)
    assert rep.passed
    assert rep.measured == pytest.approx(1.0, abs=1e-9)


def test_lower_bound_formula_by_regime():
    p = dense_problem([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]], weights=[1.0, 2.0, 4.0])
    # M = 2, n_i = 2 for both rows, A_max = 2
    r = np.array([1 / 2, min(1 / 4, 1 / 2), 1 / 2])
    share = p.weights / (4.0 * 2)
    np.testing.assert_allclose(lower_bounds(p, 0.5), (share * r) ** 2)
    np.testing.assert_allclose(lower_bounds(p, 3.0),
                               2.0 ** (-2 / 3) * share ** (1 / 3) * r)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_lower_bound_holds_on_random_instances(alpha):
    for p in corpus(17, 10, n_min=6, n_max=6, m_min=4, m_max=4):
        assert check_lower_bound(p, alpha).passed


def test_lower_bound_requires_certified_oracle():
    p = simplex([1.0, 1.0])
    bad = OracleSolution(np.array([0.5, 0.5]), np.array([2.0]), 1e-3, "barrier")
    with pytest.raises(ValueError, match="residual"):
        check_lower_bound(p, oracle_solution=bad)


@pytest.mark.parametrize("p, eps", [
    (simplex([1.0, 1.0]), 0.1),
    (corpus(3, 1, n_min=3, n_max=3, m_min=3, m_max=3)[0], 0.05),
    (simplex([2.0]), 0.1),
])
def test_lp_approx_examples(p, eps):
    rep = check_lp_approx(p, eps)
    assert rep.passed and rep.margin >= 0


@pytest.mark.parametrize("w", [(1.0, 1.0), (1.0, 3.0)])
def test_near_one_transfer_examples(w):
    rep = check_near_one_transfer(simplex(list(w)), 0.1)
    assert rep.passed, rep.details


def test_near_one_transfer_random():
    p = corpus(23, 1, n_min=4, n_max=4, m_min=4, m_max=4)[0]
    assert check_near_one_transfer(p, 0.1).passed


def test_mmf_limit_examples():
    rep = check_mmf_limit(simplex([1.0, 1.0, 1.0]), 0.3)
    assert rep.passed and rep.measured == pytest.approx(0.0, abs=1e-9)
    p = dense_problem([[1, 1, 0], [0, 1, 1]])
    assert mmf_alpha(p, 0.25) == pytest.approx(4 * np.log(3))
    rep = check_mmf_limit(p, 0.25)
    assert rep.passed
    assert rep.details["alpha"] == pytest.approx(4.394, abs=1e-3)
    q = simplex([1.0, 2.0])
    assert mmf_alpha(q, 0.2) == pytest.approx(5 * np.log(4))
    rep = check_mmf_limit(q, 0.2)
    assert rep.passed and rep.details["objective_gap_ok"]


def test_mmf_limit_float_guard():
    p = dense_problem(np.full((2, 3), 50.0), weights=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="float-range guard"):
        check_mmf_limit(p, 0.05)


def test_run_check_dispatch_and_csv(tmp_path):
    p = simplex([1.0, 2.0])
    reps = [run_check("lower-bound", p), run_check("mmf-limit", p, 0.25)]
    with pytest.raises(ValueError, match="needs epsilon"):
        run_check("lp-approx", p)
    with pytest.raises(ValueError, match="unknown check"):
        run_check("bogus", p, 0.1)
    path = tmp_path / "lemmas.csv"
    write_reports(reps, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LEMMA_COLUMNS)
    assert len(lines) == 3 and all(line.endswith(",true") for line in lines[1:])
    assert reports_to_csv_text(reps) == path.read_text()
