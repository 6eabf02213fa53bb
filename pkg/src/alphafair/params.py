"""Algorithm constants derived from the accuracy target and problem statistics.

Every constant the round dynamics consume lives on :class:`SolverParams`:
the lower thresholds ``delta_j``, the dual scale ``C`` and steepness
``kappa``, the acceptance band ``gamma`` and the step sizes ``beta1`` /
``beta2``, together with the warm-up lengths ``tau0`` / ``tau1``.  The
dynamics only see the problem through these numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from alphafair.model import PackingProblem


class EpsilonError(ValueError):
    """Raised when epsilon is outside the admissible range for alpha."""


class FloatRangeError(ArithmeticError):
    """Raised when an instance cannot be represented in double precision."""

    def __init__(self, detail: str):
        super().__init__(f"instance out of float range: {detail}")


def epsilon_bounds(alpha: float) -> dict[str, float]:
    """Upper bounds on epsilon that apply at this alpha, keyed by a label."""
    bounds = {"eps <= 1/6": 1.0 / 6.0, "eps <= 9/(10*alpha)": 9.0 / (10.0 * alpha)}
    if alpha < 1.0:
        bounds["eps <= (1-alpha)/alpha"] = (1.0 - alpha) / alpha
    return bounds


def validate_epsilon(epsilon: float, alpha: float, clamp: bool = False) -> float:
    """Checks epsilon against the standing assumptions for this alpha.

    The admissible range is ``eps <= min(1/6, 9/(10 alpha))`` and, for
    ``alpha < 1``, additionally ``eps <= (1 - alpha)/alpha``.

    Args:
        epsilon: Requested accuracy, must be positive.
        alpha: The (effective) fairness parameter.
        clamp: When true, return the largest admissible value instead of
            raising.

    Returns:
        The accepted (possibly clamped) epsilon.

    Raises:
        EpsilonError: If epsilon is out of range and ``clamp`` is false.  The
            message names the tightest violated bound.
    """
    epsilon = float(epsilon)
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise EpsilonError(f"epsilon out of admissible range: must be positive, got {epsilon}")
    bounds = epsilon_bounds(alpha)
    label, limit = min(bounds.items(), key=lambda kv: kv[1])
    if epsilon <= limit:
        return epsilon
    if clamp:
        return limit
    raise EpsilonError(
        f"epsilon out of admissible range: eps={epsilon:g} violates {label} "
        f"= {limit:.6g} at alpha={alpha:g}")


@dataclass(frozen=True, eq=False)
class SolverParams:
    """Derived constants for one (problem, epsilon, alpha) triple.

    Attributes:
        epsilon: The accuracy the constants were derived from.
        alpha_effective: The alpha the dynamics run at.
        delta: Per-agent lower thresholds.
        delta_min, delta_max: Extremes of ``delta``.
        C: Dual scale; equals ``w_j / delta_j**alpha`` for every ``j``.
        log_C: ``ln C`` (the dynamics use it directly).
        kappa: Exponent steepness of the duals.
        gamma: Half-width of the acceptance band around 1 (``eps/4``).
        beta1, beta2: Multiplicative increase / decrease step sizes.
        tau0: ``ln(1/delta_min) / beta1``.
        tau1: ``ln(n A_max) / beta2``.
    """

    epsilon: float
    alpha_effective: float
    delta: np.ndarray
    delta_min: float
    delta_max: float
    C: float
    log_C: float
    kappa: float
    gamma: float
    beta1: float
    beta2: float
    tau0: float
    tau1: float

    @property
    def is_log(self) -> bool:
        """Whether the logarithmic (alpha == 1) branch applies."""
        return self.alpha_effective == 1.0

    def default_budget(self) -> int:
        """Fifty times the combined warm-up length, in rounds."""
        return 50 * math.ceil(self.tau0 + self.tau1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta"] = [float(v) for v in self.delta]
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def _log_deltas(problem: PackingProblem, alpha: float) -> np.ndarray:
    w = problem.weights
    n, m, A = problem.n, problem.m, problem.A_max
    base = np.log(w / (2.0 * problem.w_max)) / alpha
    if alpha <= 1.0:
        return base - (math.log(m) + 2.0 * math.log(n) + math.log(A)) / alpha
    return base - (math.log(m) + 2.0 * math.log(n) + (2.0 - 1.0 / alpha) * math.log(A))


def derive(problem: PackingProblem, epsilon: float, alpha: float | None = None) -> SolverParams:
    """Computes all algorithm constants.

    Args:
        problem: Normalized problem.
        epsilon: Accuracy parameter (validated by the caller).
        alpha: Effective alpha; defaults to ``problem.alpha``.

    Returns:
        The derived :class:`SolverParams`.

    Raises:
        FloatRangeError: If the thresholds underflow or the dual scale is not
            finite in double precision.
        AssertionError: If the step-size safety inequalities fail (they hold
            by construction; the check guards transcription errors).
    """
    alpha = float(problem.alpha if alpha is None else alpha)
    epsilon = float(epsilon)
    if not (epsilon > 0 and alpha > 0):
        raise ValueError("epsilon and alpha must be positive")
    n, m, A = problem.n, problem.m, problem.A_max
    log_delta = _log_deltas(problem, alpha)
    delta = np.exp(log_delta)
    if not np.all(delta > 0) or float(log_delta.min()) < -700.0:
        raise FloatRangeError(f"delta_min = exp({float(log_delta.min()):.4g}) underflows")
    # C = W / sum_j delta_j^alpha, in log space.
    la = alpha * log_delta
    top = float(la.max())
    log_sum = top + math.log(float(np.exp(la - top).sum()))
    log_C = math.log(problem.W) - log_sum
    C = math.exp(log_C) if log_C < 709.0 else math.inf
    kappa = (log_C + math.log(m * A) - math.log(epsilon * problem.w_min)) / epsilon
    if not (math.isfinite(log_C) and math.isfinite(kappa) and kappa > 0):
        raise FloatRangeError(f"dual scale ln C = {log_C:.4g}, kappa = {kappa:.4g}")
    gamma = epsilon / 4.0
    beta = gamma / (5.0 * (kappa + 1.0)) if alpha <= 1.0 else gamma / (5.0 * (kappa + alpha))
    ln_inv_dmin = -float(log_delta.min())
    beta2 = beta * beta / ln_inv_dmin if alpha < 1.0 else beta
    tau0 = ln_inv_dmin / beta
    tau1 = math.log(n * A) / beta2 if n * A > 1 else 0.0

    up = alpha * math.log1p(beta) + kappa * beta
    down = alpha * math.log1p(-beta2) - kappa * beta2
    assert up <= math.log1p(gamma / 4.0), "increase step violates the ratio-drift bound"
    assert down >= math.log1p(-gamma / 4.0), "decrease step violates the ratio-drift bound"

    return SolverParams(
        epsilon=epsilon, alpha_effective=alpha, delta=delta,
        delta_min=float(delta.min()), delta_max=float(delta.max()),
        C=C, log_C=log_C, kappa=kappa, gamma=gamma, beta1=beta, beta2=beta2,
        tau0=tau0, tau1=tau1)
