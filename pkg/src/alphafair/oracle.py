"""Independent reference solvers.

These exist to validate the round dynamics and the structural bounds at
desk scale, and share no code with the solver beyond the problem container:

* :func:`barrier_solve` - damped Newton on a log-barrier formulation;
* :func:`single_constraint_closed_form` - the one-row KKT solution;
* :func:`max_min_fair` - progressive filling;
* :func:`lp_solve` - exact linear optimum by vertex enumeration.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from alphafair.model import PackingProblem, max_violation

log = logging.getLogger(__name__)

BARRIER_MAX_SIZE = 200
LP_MAX_SIZE = 12


@dataclass
class OracleSolution:
    """A reference optimum.

    Attributes:
        x_star: Optimal allocation (normalized coordinates).
        y_star: Duals, when the method produces them.
        kkt_residual: Largest of the scaled residuals in ``residuals``.
        method: Which oracle produced the solution.
        converged: Whether the method met its own tolerance.
        alpha: The alpha solved for (None for the linear/max-min oracles).
        residuals: Per-condition residuals (primal feasibility, dual sign,
            complementary slackness, gradient condition).
        info: Free-form diagnostics (iterations, messages).
    """

    x_star: np.ndarray
    y_star: np.ndarray | None
    kkt_residual: float
    method: str
    converged: bool = True
    alpha: float | None = None
    residuals: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def _shifted_utility(x: np.ndarray, w: np.ndarray, alpha: float) -> float:
    """``sum_j w_j (x_j^(1-alpha) - 1)/(1-alpha)``; continuous through alpha = 1."""
    lx = np.log(x)
    if alpha == 1.0:
        return float(np.dot(w, lx))
    e = 1.0 - alpha
    return float(np.dot(w, np.expm1(e * lx) / e))


def kkt_residuals(problem: PackingProblem, x, y, alpha: float) -> dict:
    """Scale-free residuals of the optimality conditions at ``(x, y)``.

    Complementary slackness is measured as ``max_i y_i (1 - a_i x) / D`` with
    ``D = sum_j w_j x_j^(1-alpha)`` (which equals ``sum_i y_i`` at an optimum),
    and the gradient condition as ``max_j |xi_j - 1|``.
    """
    A = problem.dense()
    w = problem.weights
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    act = A @ x
    scale = float(np.dot(w, x ** (1.0 - alpha)))
    xi = x ** alpha * (A.T @ y) / w
    return {
        "primal": float(max(0.0, act.max() - 1.0)),
        "dual_sign": float(max(0.0, -y.min())),
        "slackness": float(np.max(np.abs(y * (1.0 - act))) / scale),
        "gradient": float(np.max(np.abs(xi - 1.0))),
    }


def barrier_solve(problem: PackingProblem, alpha: float | None = None, tol: float = 1e-9,
                  max_newton: int = 500) -> OracleSolution:
    """Maximizes ``p_alpha`` over ``{A x <= 1, x >= 0}`` with a log barrier.

    Each stage maximizes ``p_alpha(x)/D + mu sum_i ln(1 - a_i x)`` by damped
    Newton steps (the Hessian is diagonally preconditioned and factorized by
    Cholesky), then sets ``mu <- mu/10``, starting from ``mu = 1`` and ending
    once ``mu <= tol``.  ``D = sum_j w_j x_j^(1-alpha)`` is refreshed at each
    stage so the objective stays of order one even for large alpha.  Barrier
    duals are ``y_i = D mu / (1 - a_i x)``; the final point is then polished
    by solving the optimality system on the active rows (see
    :func:`_polish`), and the polished pair is kept when its residual is
    smaller.

    Args:
        problem: Normalized problem with ``n, m <= 200``.
        alpha: Defaults to ``problem.alpha``.
        tol: Final barrier weight; at least 1e-10.
        max_newton: Iteration cap per stage.

    Returns:
        The solution, with ``converged`` false if the final residual exceeds
        ``10 tol`` (centring failures of intermediate stages are listed in
        ``info["messages"]``).
    """
    alpha = float(problem.alpha if alpha is None else alpha)
    if tol < 1e-10:
        raise ValueError("tol must be at least 1e-10")
    if max(problem.n, problem.m) > BARRIER_MAX_SIZE:
        raise ValueError(f"barrier oracle limited to n, m <= {BARRIER_MAX_SIZE}")
    A = problem.dense()
    w = problem.weights
    x = np.full(problem.n, 0.5 / A.sum(axis=1).max())
    mu = 1.0
    total_iters = 0
    ok = True
    messages = []
    while True:
        D = float(np.dot(w, x ** (1.0 - alpha)))
        centred = False
        lam2_prev = np.inf
        for _ in range(max_newton):
            total_iters += 1
            s = 1.0 - A @ x
            grad = w * x ** (-alpha) / D - mu * (A.T @ (1.0 / s))
            hdiag = alpha * w * x ** (-alpha - 1.0) / D
            p = 1.0 / np.sqrt(hdiag)
            B = (A * p[None, :]) / s[:, None]
            M = np.eye(problem.n) + mu * (B.T @ B)
            try:
                z = scipy.linalg.cho_solve(scipy.linalg.cho_factor(M), p * grad)
            except np.linalg.LinAlgError:
                z = np.linalg.lstsq(M, p * grad, rcond=None)[0]
            d = p * z
            lam2 = float(np.dot(grad, d))
            # centred once the decrement is negligible or has stalled at rounding level
            if lam2 <= 1e-20 or (lam2 <= 1e-12 and lam2 >= 0.5 * lam2_prev):
                centred = True
                break
            lam2_prev = lam2
            # largest step keeping x > 0 and the slacks > 0
            Ad = A @ d
            tmax = np.inf
            neg = d < 0
            if neg.any():
                tmax = min(tmax, float(np.min(-x[neg] / d[neg])))
            pos = Ad > 0
            if pos.any():
                tmax = min(tmax, float(np.min(s[pos] / Ad[pos])))
            t = min(1.0, 0.95 * tmax)
            if lam2 > 1e-10:
                f0 = _shifted_utility(x, w, alpha) / D + mu * float(np.log(s).sum())
                while t > 1e-14:
                    xn = x + t * d
                    sn = 1.0 - A @ xn
                    if np.all(sn > 0) and np.all(xn > 0):
                        f1 = _shifted_utility(xn, w, alpha) / D + mu * float(np.log(sn).sum())
                    else:  # rounding put the trial point on the boundary
                        f1 = -np.inf
                    if f1 >= f0 + 0.25 * t * lam2:
                        break
                    t *= 0.5
                if t <= 1e-14:
                    messages.append(f"line search failed at mu={mu:g}")
                    ok = False
                    break
            x = x + t * d
        if not centred:
            ok = False
            messages.append(f"stage mu={mu:g} did not centre")
        if mu <= tol:
            break
        mu /= 10.0
    # duals from the same normalisation the last centring used
    slack = 1.0 - A @ x
    y = D * mu / slack
    res = kkt_residuals(problem, x, y, alpha)
    resid = max(res.values())
    barrier_resid = resid
    polished = _polish(A, w, alpha, x, y, slack)
    if polished is not None:
        res_p = kkt_residuals(problem, *polished, alpha)
        if max(res_p.values()) < resid:
            (x, y), res, resid = polished, res_p, max(res_p.values())
    # tight rows may sit an ulp above 1 under another summation order
    for _ in range(8):
        v = max_violation(problem, x)
        if v <= 0.0:
            break
        x = x / (1.0 + v) * (1.0 - 2.0 ** -52)
        res = kkt_residuals(problem, x, y, alpha)
        resid = max(res.values())
    converged = resid <= 10.0 * tol
    if not converged:
        log.warning("barrier oracle: residual %.3g (%s)", resid, "; ".join(messages) or "tolerance")
    return OracleSolution(x_star=x, y_star=y, kkt_residual=resid, method="barrier",
                          converged=converged, alpha=alpha, residuals=res,
                          info={"newton_iterations": total_iters, "final_mu": mu,
                                "messages": messages, "barrier_residual": barrier_resid,
                                "polished": resid < barrier_resid})


def _solve_active_set(A, w, alpha, rows, log_y0, max_iter: int = 100):
    """Solves the optimality system with duals supported on ``rows``.

    With ``y`` zero off ``rows``, stationarity gives
    ``x_j = (w_j / (A^T y)_j)^(1/alpha)``; Newton's method in ``v = ln y``
    then makes every row in ``rows`` tight.

    Returns:
        ``(x, log_y, converged)``.
    """
    AT = A[rows]
    v = log_y0.copy()
    lw = np.log(w)

    def point(v):
        shift = v.max()
        S = AT.T @ np.exp(v - shift)  # (A^T y)_j / e^shift
        lx = (lw - np.log(S) - shift) / alpha
        return np.exp(lx), S

    x, S = point(v)
    F = AT @ x - 1.0
    for _ in range(max_iter):
        if np.max(np.abs(F)) <= 4e-16 * max(1.0, AT.shape[1]):
            return x, v, True
        y_rel = np.exp(v - v.max())
        J = -(AT * (x / S)[None, :]) @ (AT.T * y_rel[None, :]) / alpha
        dv = np.linalg.lstsq(J, -F, rcond=None)[0]
        t = 1.0
        norm0 = np.max(np.abs(F))
        while t > 1e-10:
            xn, Sn = point(v + t * dv)
            Fn = AT @ xn - 1.0
            if np.max(np.abs(Fn)) < norm0 or t < 1e-3 and np.max(np.abs(Fn)) <= norm0:
                break
            t *= 0.5
        if t <= 1e-10:
            break
        v = v + t * dv
        x, S, F = xn, Sn, Fn
    return x, v, bool(np.max(np.abs(F)) <= 1e-12)


def _polish(A, w, alpha, x, y, slack, tight_slack: float = 1e-6):
    """Turns a near-optimal barrier point into an exact optimality certificate.

    The barrier's gradient accuracy is limited twice over: the slacks of
    tight rows are ~mu, so ``mu/slack`` carries the rounding of ``1 - a_i x``;
    and for large alpha the curvature of coordinates that are not
    bottlenecked is tiny relative to the objective scale, so their central
    path position converges slowly.  Starting from the near-tight rows, the
    optimality system is solved with duals supported on an active set, which
    is grown (a row becomes violated, or a variable has no active row) or
    shrunk (a dual goes to zero) until the point is feasible with positive
    duals.

    Returns:
        ``(x, y)`` if the active-set system converged, otherwise ``None``.
    """
    m, n = A.shape
    active = slack <= tight_slack
    if not active.any():
        active[int(np.argmin(slack))] = True
    log_y = np.log(np.maximum(y, 1e-300))
    for _ in range(2 * m + 2):
        uncovered = ~(A[active] > 0).any(axis=0)
        for j in np.flatnonzero(uncovered):
            cand = np.flatnonzero(A[:, j] > 0)
            active[cand[np.argmin(slack[cand])]] = True
        rows = np.flatnonzero(active)
        xs, v, ok = _solve_active_set(A, w, alpha, rows, log_y[rows])
        if not ok:
            return None
        log_y[rows] = v
        act = A @ xs
        drop = rows[v < v.max() - 690.0]  # duals numerically zero
        over = (~active) & (act > 1.0 + 1e-12)
        if over.any():
            i = int(np.argmax(np.where(over, act, -np.inf)))
            active[i] = True
            log_y[i] = v.max() - 30.0
            continue
        if drop.size:
            active[drop] = False
            continue
        y_out = np.zeros(m)
        y_out[rows] = np.exp(v)
        xs = xs / max(1.0, float(act.max()))  # absorb last-ulp overshoot of tight rows
        return xs, y_out
    return None


def single_constraint_dual(weights, row, alpha: float, tol: float = 1e-12) -> float:
    """Dual price ``y`` making ``sum_j A_j (w_j/(y A_j))^(1/alpha) = 1``.

    Found by bisection on ``ln y`` (the left side is decreasing in ``y``)
    until the bracket is narrower than ``tol`` relative to ``y``.
    """
    w = np.asarray(weights, dtype=float)
    a = np.asarray(row, dtype=float)
    if w.shape != a.shape or np.any(a <= 0) or np.any(w <= 0):
        raise ValueError("weights and row must be positive and of equal length")

    def excess(log_y):
        return float(np.sum(a * np.exp((np.log(w / a) - log_y) / alpha))) - 1.0

    lo, hi = -1.0, 1.0
    while excess(lo) < 0:
        lo *= 2.0
    while excess(hi) > 0:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def single_constraint_closed_form(weights, row, alpha: float) -> np.ndarray:
    """Optimum of ``max sum w_j f_alpha(x_j)`` subject to ``sum_j A_j x_j <= 1``.

    Stationarity gives ``x_j = (w_j / (y A_j))^(1/alpha)``; the price ``y``
    makes the constraint tight (see :func:`single_constraint_dual`).
    """
    w = np.asarray(weights, dtype=float)
    a = np.asarray(row, dtype=float)
    y = single_constraint_dual(w, a, alpha)
    return (w / (y * a)) ** (1.0 / alpha)


def max_min_fair(problem: PackingProblem, rel_tol: float = 1e-12) -> np.ndarray:
    """Max-min fair allocation by progressive filling.

    All unfrozen coordinates rise together; the level at which each
    constraint would become tight is computed from the frozen part, the
    lowest such level is taken, and every unfrozen variable of the tight
    constraints is frozen there.
    """
    A = problem.dense()
    n = problem.n
    z = np.zeros(n)
    frozen = np.zeros(n, dtype=bool)
    while not frozen.all():
        live = A[:, ~frozen].sum(axis=1)
        used = A[:, frozen] @ z[frozen]
        rows = live > 0
        caps = np.full(problem.m, np.inf)
        caps[rows] = (1.0 - used[rows]) / live[rows]
        level = float(caps.min())
        tight = rows & (caps <= level * (1.0 + rel_tol))
        newly = (~frozen) & (A[tight] > 0).any(axis=0)
        z[newly] = level
        frozen |= newly
    return z


def exchange_violations(z_star, candidates, tol: float = 1e-9) -> np.ndarray:
    """Flags candidates that refute max-min fairness of ``z_star``.

    A candidate ``z`` refutes it when some coordinate rises (``z_j > z*_j``)
    while no coordinate with ``z*_k <= z*_j`` falls (``z_k < z*_k``).

    Returns:
        Boolean array, one entry per candidate row.
    """
    zs = np.asarray(z_star, dtype=float)
    Z = np.atleast_2d(np.asarray(candidates, dtype=float))
    inc = Z > zs + tol
    dec = Z < zs - tol
    smaller = zs[None, :] <= zs[:, None] + tol  # [j, k]: z*_k <= z*_j
    covered = (dec[:, None, :] & smaller[None, :, :]).any(axis=2)
    return (inc & ~covered).any(axis=1)


def random_feasible_points(problem: PackingProblem, rng: np.random.Generator, count: int,
                           around=None, spread: float = 0.3) -> np.ndarray:
    """Random feasible allocations, optionally concentrated around a point."""
    A = problem.dense()
    if around is None:
        Z = rng.random((count, problem.n)) * rng.random((count, 1))
    else:
        Z = np.maximum(np.asarray(around)[None, :] * (1.0 + spread * rng.standard_normal((count, problem.n))), 0.0)
    act = Z @ A.T
    scale = np.maximum(act.max(axis=1), 1.0)
    return Z / scale[:, None]


def lp_solve(problem: PackingProblem, weights=None) -> tuple[np.ndarray, float]:
    """Exact maximum of ``sum_j w_j z_j`` over ``{A z <= 1, z >= 0}``.

    Every vertex of the polytope is determined by ``k`` tight rows and a
    support of ``k`` variables (the rest at zero); all such square systems are
    enumerated and solved in batches.

    Raises:
        ValueError: If ``n`` or ``m`` exceeds 12.
    """
    n, m = problem.n, problem.m
    if n > LP_MAX_SIZE or m > LP_MAX_SIZE:
        raise ValueError(f"scale guard: vertex enumeration limited to n, m <= {LP_MAX_SIZE}")
    A = problem.dense()
    w = problem.weights if weights is None else np.asarray(weights, dtype=float)
    best_val = 0.0
    best_z = np.zeros(n)
    for k in range(1, min(m, n) + 1):
        row_sets = np.array(list(itertools.combinations(range(m), k)), dtype=np.int64)
        col_sets = np.array(list(itertools.combinations(range(n), k)), dtype=np.int64)
        pairs = [(r, c) for r in range(len(row_sets)) for c in range(len(col_sets))]
        for start in range(0, len(pairs), 50000):
            chunk = np.array(pairs[start:start + 50000], dtype=np.int64)
            R = row_sets[chunk[:, 0]]
            C = col_sets[chunk[:, 1]]
            mats = A[R[:, :, None], C[:, None, :]]
            det = np.linalg.det(mats)
            good = np.abs(det) > 1e-12
            if not good.any():
                continue
            sol = np.linalg.solve(mats[good], np.ones((int(good.sum()), k, 1)))[:, :, 0]
            Cg = C[good]
            Zs = np.zeros((sol.shape[0], n))
            np.put_along_axis(Zs, Cg, sol, axis=1)
            feas = (Zs >= -1e-12).all(axis=1) & ((Zs @ A.T) <= 1.0 + 1e-9).all(axis=1)
            if not feas.any():
                continue
            vals = Zs[feas] @ w
            i = int(np.argmax(vals))
            if vals[i] > best_val:
                best_val = float(vals[i])
                best_z = np.maximum(Zs[feas][i], 0.0)
    return best_z, best_val
