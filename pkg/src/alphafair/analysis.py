"""Numerical checks of the structural bounds on concrete instances.

Each check compares a closed-form bound with reference optima from
:mod:`alphafair.oracle` (never with solver output, except where the bound is
about solver output) and returns a :class:`LemmaReport`:

* ``lower-bound``: every coordinate of the optimum is at least a computable
  lower bound;
* ``lp-approx``: at a tiny alpha, the weighted LP optimum is within a
  ``1 - 3 eps`` factor of the alpha-fair optimum value;
* ``near-one``: an eps-approximate proportionally fair allocation is a
  ``2 eps``-approximate solution for alpha just below and above 1;
* ``mmf-limit``: for alpha large enough, the alpha-fair optimum lies within a
  ``1 +- eps`` band of the max-min fair vector, elementwise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from alphafair.model import PackingProblem, atomic_write_text, coerce_problem, objective
from alphafair.oracle import OracleSolution, barrier_solve, lp_solve, max_min_fair
from alphafair.params import derive
from alphafair.solver import solve, tiny_alpha_threshold

LEMMA_IDS = ("lower-bound", "lp-approx", "near-one", "mmf-limit")

LEMMA_COLUMNS = ("lemma_id", "instance_hash", "claimed", "measured", "margin", "pass")

#: Oracle residual required before the lower bound is checked.
ORACLE_RESIDUAL_MAX = 1e-6

#: Relative slack granted to the lower bound for the oracle's accuracy.
LOWER_BOUND_SLACK = 1e-6

#: Largest alpha at which ``x**alpha`` stays comfortably in double range.
MAX_ALPHA = 80.0


@dataclass
class LemmaReport:
    """Outcome of one structural check on one instance.

    Attributes:
        lemma_id: One of :data:`LEMMA_IDS`.
        instance: Short description of the instance.
        instance_hash: Content hash of the normalized problem.
        claimed: The bound.
        measured: The measured quantity.
        margin: Distance to the bound, oriented so that ``margin >= 0``
            exactly when the check passes.
        passed: Whether the measured value satisfies the bound.
        details: Check-specific extras (alphas used, per-coordinate data).
    """

    lemma_id: str
    instance: str
    instance_hash: str
    claimed: float
    measured: float
    margin: float
    passed: bool
    details: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"lemma_id": self.lemma_id, "instance_hash": self.instance_hash,
                "claimed": self.claimed, "measured": self.measured, "margin": self.margin,
                "pass": self.passed}


def _describe(problem: PackingProblem) -> str:
    label = f"n={problem.n} m={problem.m} A_max={problem.A_max:g} R_w={problem.R_w:g}"
    return f"{problem.name} ({label})" if problem.name else label


def _shifted(x: np.ndarray, alpha: float) -> np.ndarray:
    """``(x^(1-alpha) - 1)/(1-alpha)``, continuous through alpha = 1."""
    lx = np.log(x)
    if alpha == 1.0:
        return lx
    return np.expm1((1.0 - alpha) * lx) / (1.0 - alpha)


def lower_bounds(problem: PackingProblem, alpha: float) -> np.ndarray:
    """Per-coordinate lower bounds on the alpha-fair optimum.

    With ``M = min(m, n)``, ``n_i`` the nonzero count of row ``i`` and
    ``r_j = min_{i: A_ij > 0} 1/(n_i A_ij)``:

    * ``alpha <= 1``: ``(w_j/(w_max M) * r_j)^(1/alpha)``;
    * ``alpha > 1``: ``A_max^((1-alpha)/alpha) (w_j/(w_max M))^(1/alpha) r_j``.
    """
    problem = coerce_problem(problem)
    M = min(problem.m, problem.n)
    counts = problem.row_counts
    r = np.full(problem.n, np.inf)
    for j in range(problem.n):
        rows = problem.col_idx[problem.col_ptr[j]:problem.col_ptr[j + 1]]
        vals = problem.col_data[problem.col_ptr[j]:problem.col_ptr[j + 1]]
        r[j] = float(np.min(1.0 / (counts[rows] * vals)))
    share = problem.weights / (problem.w_max * M)
    if alpha <= 1.0:
        return (share * r) ** (1.0 / alpha)
    return problem.A_max ** ((1.0 - alpha) / alpha) * share ** (1.0 / alpha) * r


def check_lower_bound(problem, alpha: float | None = None,
                      oracle_solution: OracleSolution | None = None) -> LemmaReport:
    """Checks ``x*_j >= bound_j (1 - 1e-6)`` for every coordinate.

    Args:
        problem: Raw or normalized problem.
        alpha: Defaults to the problem's alpha.
        oracle_solution: Reference optimum; computed with the barrier oracle
            when omitted.

    Raises:
        ValueError: If the reference optimum's residual exceeds 1e-6.
    """
    problem = coerce_problem(problem)
    alpha = float(problem.alpha if alpha is None else alpha)
    sol = oracle_solution or barrier_solve(problem, alpha)
    if not sol.kkt_residual <= ORACLE_RESIDUAL_MAX:
        raise ValueError(f"oracle residual {sol.kkt_residual:.3g} exceeds "
                         f"{ORACLE_RESIDUAL_MAX:g}; the lower bound check needs a certified optimum")
    bound = lower_bounds(problem, alpha)
    ratio = sol.x_star / bound
    measured = float(ratio.min())
    claimed = 1.0 - LOWER_BOUND_SLACK
    return LemmaReport(
        "lower-bound", _describe(problem), problem.content_hash(), claimed, measured,
        measured - claimed, measured >= claimed,
        {"alpha": alpha, "bound": bound.tolist(), "x_star": sol.x_star.tolist(),
         "tightest_agent": int(ratio.argmin())})


def check_lp_approx(problem, epsilon: float) -> LemmaReport:
    """Checks ``sum_j w_j z*_j >= (1 - 3 eps) sum_j w_j (x*_j)^(1-alpha)/(1-alpha)``.

    ``alpha`` is set to the linear threshold ``(eps/4)/ln(n A_max/eps)``;
    ``z*`` is the weighted LP optimum and ``x*`` the alpha-fair optimum.
    """
    problem = coerce_problem(problem)
    alpha = tiny_alpha_threshold(problem, epsilon)
    z, lp_value = lp_solve(problem)
    sol = barrier_solve(problem, alpha)
    fair_value = objective(problem, sol.x_star, alpha)
    claimed = (1.0 - 3.0 * epsilon) * fair_value
    return LemmaReport(
        "lp-approx", _describe(problem), problem.content_hash(), claimed, lp_value,
        lp_value - claimed, lp_value >= claimed,
        {"alpha": alpha, "epsilon": epsilon, "lp_value": lp_value, "fair_value": fair_value,
         "z_star": z.tolist(), "x_star": sol.x_star.tolist(),
         "oracle_residual": sol.kkt_residual})


def check_near_one_transfer(problem, epsilon: float, *, max_rounds: int | None = None) -> LemmaReport:
    """Checks that a proportionally fair eps-approximation transfers to alpha ~ 1.

    The round dynamics are run at alpha = 1 to an eps-approximate ``x``;
    then, for ``alpha = 1 - 1/tau0`` and ``1 + 1/tau0`` (``tau0`` derived at
    alpha = 1), the relative suboptimality
    ``(p_alpha(x*) - p_alpha(x)) / |p_alpha(x)|`` is compared with ``2 eps``,
    where ``x*`` is the barrier optimum at that alpha.  The difference of
    objectives is evaluated on shifted utilities, which avoids cancelling the
    ``W/(1-alpha)`` offset.
    """
    problem = coerce_problem(problem)
    res = solve(problem, epsilon, alpha=1.0, max_rounds=max_rounds)
    tau0 = derive(problem, epsilon, 1.0).tau0
    x = res.x
    w = problem.weights
    edges = {}
    worst = -math.inf
    for alpha in (1.0 - 1.0 / tau0, 1.0 + 1.0 / tau0):
        sol = barrier_solve(problem, alpha)
        diff = float(np.sum(w * (_shifted(sol.x_star, alpha) - _shifted(x, alpha))))
        p_x = objective(problem, x, alpha)
        rel = diff / abs(p_x)
        worst = max(worst, rel)
        edges[f"{alpha!r}"] = {"suboptimality": diff, "p_alpha_x": p_x, "relative": rel,
                               "relative_to_W": diff / problem.W,
                               "oracle_residual": sol.kkt_residual}
    claimed = 2.0 * epsilon
    passed = res.converged and worst <= claimed
    return LemmaReport(
        "near-one", _describe(problem), problem.content_hash(), claimed, worst,
        claimed - worst, passed,
        {"epsilon": epsilon, "tau0": tau0, "solver_stop": res.stop_reason,
         "solver_rounds": res.rounds, "edges": edges, "x": x.tolist()})


def mmf_alpha(problem, epsilon: float) -> float:
    """The alpha at which the max-min limit is checked: ``ln(R_w n A_max)/eps``."""
    problem = coerce_problem(problem)
    return math.log(problem.R_w * problem.n * problem.A_max) / epsilon


def check_mmf_limit(problem, epsilon: float) -> LemmaReport:
    """Checks ``(1 - eps) z* <= x* <= (1 + eps) z*`` elementwise.

    ``alpha`` is set exactly to ``ln(R_w n A_max)/eps``; ``z*`` is the
    (unweighted) max-min fair vector and ``x*`` the weighted alpha-fair
    optimum.  The objective form is reported as well: for ``alpha > 1`` the
    objectives are negative and the reported inequality is
    ``p_alpha(x*) - p_alpha(z*) <= eps (alpha - 1) (-p_alpha(z*))``.

    Raises:
        ValueError: If the threshold alpha exceeds :data:`MAX_ALPHA`
            (increase epsilon or use a smaller instance).
    """
    problem = coerce_problem(problem)
    alpha = mmf_alpha(problem, epsilon)
    if alpha > MAX_ALPHA:
        raise ValueError(f"float-range guard: alpha = ln(R_w n A_max)/eps = {alpha:.4g} "
                         f"exceeds {MAX_ALPHA:g}; increase eps")
    z = max_min_fair(problem)
    sol = barrier_solve(problem, alpha)
    x = sol.x_star
    ratio = x / z
    measured = float(np.max(np.abs(ratio - 1.0)))
    passed = bool(np.all((1.0 - epsilon) * z <= x) and np.all(x <= (1.0 + epsilon) * z))
    details = {"alpha": alpha, "epsilon": epsilon, "z_star": z.tolist(), "x_star": x.tolist(),
               "oracle_residual": sol.kkt_residual}
    if alpha > 1.0:
        w = problem.weights
        gap = float(np.sum(w * (_shifted(x, alpha) - _shifted(z, alpha))))
        p_z = objective(problem, z, alpha)
        bound = epsilon * (alpha - 1.0) * (-p_z)
        details.update({"objective_gap": gap, "objective_gap_bound": bound,
                        "objective_gap_ok": gap <= bound,
                        "sign_convention": "p_alpha < 0 for alpha > 1; bound is "
                                           "eps*(alpha-1)*(-p_alpha(z*))"})
    return LemmaReport("mmf-limit", _describe(problem), problem.content_hash(), epsilon,
                       measured, epsilon - measured, passed, details)


def run_check(lemma_id: str, problem, epsilon: float | None = None,
              alpha: float | None = None) -> LemmaReport:
    """Dispatches a check by its identifier (see :data:`LEMMA_IDS`)."""
    if lemma_id == "lower-bound":
        return check_lower_bound(problem, alpha)
    if epsilon is None:
        raise ValueError(f"check {lemma_id!r} needs epsilon")
    if lemma_id == "lp-approx":
        return check_lp_approx(problem, epsilon)
    if lemma_id == "near-one":
        return check_near_one_transfer(problem, epsilon)
    if lemma_id == "mmf-limit":
        return check_mmf_limit(problem, epsilon)
    raise ValueError(f"unknown check {lemma_id!r}; expected one of {', '.join(LEMMA_IDS)}")


def reports_to_csv_text(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LEMMA_COLUMNS)
    for rep in reports:
        r = rep.row()
        writer.writerow([r["lemma_id"], r["instance_hash"], repr(float(r["claimed"])),
                         repr(float(r["measured"])), repr(float(r["margin"])),
                         "true" if r["pass"] else "false"])
    return buf.getvalue()


def write_reports(reports, path) -> None:
    """Writes the lemma-report CSV atomically."""
    atomic_write_text(path, reports_to_csv_text(reports))
