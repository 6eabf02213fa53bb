"""Round dynamics, diagnostics and the stopping loop.

One round, applied to the current allocation ``x``:

1. clamp every ``x_j`` into ``[delta_j, 1]``;
2. recompute the duals ``y_i = C exp(kappa (a_i x - 1))`` from scratch;
3. compare each agent's KKT ratio ``xi_j = x_j^alpha (A^T y)_j / w_j`` with
   the band ``(1 - gamma, 1 + gamma)``: below it the agent grows by
   ``1 + beta1``, above it the agent shrinks by ``1 - beta2`` (never below
   ``delta_j``), inside it the agent stays put.

All agents react to the same snapshot of ``y``.  The dynamics keep no memory
between rounds, so any starting point is admissible and the run can be
perturbed or re-parameterised at any time.

:func:`solve` iterates rounds until the duality gap certifies the requested
accuracy.  Two refinements keep long runs tractable without changing the
sequence of allocations the dynamics visit:

* *fast-forward*: when all movers go in one direction and the decision vector
  repeats, the decisions stay frozen for a computable number of rounds, which
  are then applied in closed form;
* *accuracy continuation*: if the dynamics reach a point where no agent moves
  but the gap does not certify the target, the working epsilon is halved and
  the constants re-derived (the dynamics are stateless, so this is a fresh
  run started at the current point).
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from alphafair import _kernels as K
from alphafair.model import (
    Allocation,
    PackingProblem,
    atomic_write_text,
    coerce_problem,
    objective,
    row_activity,
)
from alphafair.params import FloatRangeError, SolverParams, derive, validate_epsilon

log = logging.getLogger(__name__)

#: Largest exponent whose exponential is finite in double precision.
MAX_EXPONENT = 709.78

TRACE_COLUMNS = ("round", "objective", "potential", "gap", "max_violation", "n_inc",
                 "n_dec", "n_clamped", "stationary", "acs1", "acs2", "acs3")

STATIONARY_LABELS = {K.NONSTATIONARY: "nonstationary", K.STATIONARY: "stationary",
                     K.PRE_TAU: "pre-tau"}

INVARIANT_NAMES = ("clamp_box", "feasibility_absorption", "potential_monotone", "ratio_drift",
                   "weak_duality", "acs_tight_constraint", "acs_dual_mass", "acs_slackness",
                   "ratio_floor")


class RegimeError(ValueError):
    """Raised when alpha falls in a regime the round dynamics do not handle."""


# ---------------------------------------------------------------------------
# Regime dispatch
# ---------------------------------------------------------------------------


class RegimeMode(str, enum.Enum):
    GENERAL = "general"
    NEAR_ONE = "near_one"
    TINY_ALPHA_LP = "tiny_alpha_lp"


@dataclass(frozen=True)
class Regime:
    """Outcome of regime dispatch.

    Attributes:
        effective_alpha: The alpha the dynamics run at.
        mode: Which regime applies.
        requested_alpha: The alpha the caller asked for.
        near_one_radius: Half-width ``1/tau0`` of the window around 1 whose
            alphas are solved at alpha = 1.
        tiny_threshold: Alphas at or below this value are treated as linear.
    """

    effective_alpha: float
    mode: RegimeMode
    requested_alpha: float
    near_one_radius: float
    tiny_threshold: float

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "effective_alpha": self.effective_alpha,
                "requested_alpha": self.requested_alpha,
                "near_one_radius": self.near_one_radius, "tiny_threshold": self.tiny_threshold}


def tiny_alpha_threshold(problem: PackingProblem, epsilon: float) -> float:
    """Alpha below which the linear objective is a (1 - 3 eps)-approximation."""
    return (epsilon / 4.0) / math.log(problem.n * problem.A_max / epsilon)


def dispatch_regime(problem: PackingProblem, epsilon: float, alpha: float | None = None) -> Regime:
    """Chooses how a requested alpha is handled.

    Alphas within ``1/tau0`` of one (``tau0`` taken at alpha = 1) are solved at
    alpha = 1; alphas at or below the tiny threshold are routed to the linear
    program; everything else runs as requested.
    """
    alpha = float(problem.alpha if alpha is None else alpha)
    radius = 1.0 / derive(problem, epsilon, 1.0).tau0
    tiny = tiny_alpha_threshold(problem, epsilon)
    if alpha <= tiny:
        mode, eff = RegimeMode.TINY_ALPHA_LP, alpha
    elif alpha != 1.0 and abs(alpha - 1.0) <= radius:
        mode, eff = RegimeMode.NEAR_ONE, 1.0
    else:
        mode, eff = RegimeMode.GENERAL, alpha
    return Regime(eff, mode, alpha, radius, tiny)


# ---------------------------------------------------------------------------
# Per-round quantities
# ---------------------------------------------------------------------------


@dataclass
class SolverState:
    """Allocation plus the duals and ratios recomputed from it.

    Attributes:
        x: Allocation in normalized coordinates.
        y: Duals ``y(x)``.
        xi: KKT ratios at ``(x, y)``.
        round_index: Number of rounds applied so far.
    """

    x: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    round_index: int = 0


@dataclass(frozen=True)
class RoundRecord:
    """One row of the convergence trace.

    Values describe the allocation after the clamp step of the round, i.e.
    the point at which duals and decisions are evaluated.
    """

    round_index: int
    objective: float
    potential: float
    duality_gap: float
    max_violation: float
    count_increased: int
    count_decreased: int
    count_clamped: int
    stationary: str
    acs: tuple[bool, bool, bool]

    @property
    def acs_ok(self) -> bool:
        return all(self.acs)


def _alloc(problem: PackingProblem, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (problem.n,):
        raise ValueError(f"allocation length {x.size} does not match n={problem.n}")
    if np.any(x < 0):
        raise ValueError("allocation has negative entries")
    return x


def compute_duals(problem: PackingProblem, params: SolverParams, x) -> np.ndarray:
    """Returns ``y_i = C exp(kappa (activity_i - 1))`` evaluated in log space.

    Raises:
        FloatRangeError: If some dual is not representable.
    """
    act = row_activity(problem, _alloc(problem, x))
    y = np.empty(problem.m)
    zmax = K.duals(act, params.log_C, params.kappa, y)
    if zmax > MAX_EXPONENT:
        raise FloatRangeError(f"dual exponent {zmax:.4g} exceeds {MAX_EXPONENT}")
    return y


def kkt_ratio(problem: PackingProblem, params: SolverParams, x, y) -> np.ndarray:
    """Returns ``xi_j = x_j^alpha (A^T y)_j / w_j``."""
    x = _alloc(problem, x)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (problem.m,):
        raise ValueError(f"dual length {y.size} does not match m={problem.m}")
    s = np.empty(problem.n)
    K.column_dual_sums(problem.col_ptr, problem.col_idx, problem.col_data, y, s)
    xi = np.empty(problem.n)
    K.kkt_ratios(x, s, problem.weights, params.alpha_effective, xi)
    return xi


def potential(problem: PackingProblem, params: SolverParams, x) -> float:
    """Returns ``p_alpha(x) - (1/kappa) sum_i y_i(x)``."""
    x = _alloc(problem, x)
    act = row_activity(problem, x)
    y = np.empty(problem.m)
    K.duals(act, params.log_C, params.kappa, y)
    return objective(problem, x, params.alpha_effective) - K.seq_sum(y) / params.kappa


def duality_gap(problem: PackingProblem, x, y, alpha: float | None = None) -> float:
    """Lagrangian duality gap of a feasible primal point and nonnegative duals.

    For alpha = 1 the gap is ``-sum_j w_j ln xi_j + sum_i y_i - W``; otherwise
    it is ``sum_j w_j x_j^(1-alpha) [(r_j - 1)/(1 - alpha) - r_j] + sum_i y_i``
    with ``r_j = xi_j^((alpha-1)/alpha)``.  Both equal the dual function at
    ``y`` minus the primal objective at ``x``, hence are nonnegative.

    Raises:
        ValueError: ``"infeasible x"`` if some constraint is violated by more
            than 1e-9, ``"nonpositive dual"`` if some ``y_i < 0``.
    """
    alpha = float(problem.alpha if alpha is None else alpha)
    x = _alloc(problem, x)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (problem.m,):
        raise ValueError(f"dual length {y.size} does not match m={problem.m}")
    if np.any(y < 0):
        raise ValueError("nonpositive dual")
    if float(row_activity(problem, x).max()) - 1.0 > K.GAP_FEAS_TOL:
        raise ValueError("infeasible x")
    if np.any(x <= 0):
        raise ValueError("allocation must be strictly positive")
    s = np.empty(problem.n)
    K.column_dual_sums(problem.col_ptr, problem.col_idx, problem.col_data, y, s)
    xi = np.empty(problem.n)
    K.kkt_ratios(x, s, problem.weights, alpha, xi)
    return float(K.gap_terms(problem.weights, x, xi, K.seq_sum(y), alpha, alpha == 1.0, problem.W))


def classify_stationary(problem: PackingProblem, params: SolverParams, x0, x1, round_index: int,
                        stage_start: int = 0) -> str:
    """Labels a round by the regime's stationarity conditions.

    Args:
        problem: The problem.
        params: Constants of the run.
        x0: Allocation after the clamp step of the round.
        x1: Allocation after the update of the round; agents with
            ``x1 > x0`` form S+, those with ``x1 < x0`` form S-.
        round_index: Index of the round.
        stage_start: Round at which the current constants took effect.

    Returns:
        ``"pre-tau"`` during the first ``tau0 + tau1`` rounds, otherwise
        ``"stationary"`` or ``"nonstationary"``.
    """
    if round_index < stage_start + params.tau0 + params.tau1:
        return "pre-tau"
    x0 = _alloc(problem, x0)
    x1 = _alloc(problem, x1)
    a = params.alpha_effective
    w = problem.weights
    y = compute_duals(problem, params, x0)
    s = np.empty(problem.n)
    K.column_dual_sums(problem.col_ptr, problem.col_idx, problem.col_data, y, s)
    xs = x0 * s
    up, down = x1 > x0, x1 < x0
    g = params.gamma
    if params.is_log:
        W = problem.W
        ok = w[up].sum() <= W / params.tau0 and (1 - 2 * g) * W <= xs.sum() <= (1 + 2 * g) * W
    else:
        wx = w * x0 ** (1.0 - a)
        if a < 1.0:
            ok = wx[down].sum() <= g * wx.sum() and xs.sum() <= (1 + 1.25 * g) * wx.sum()
        else:
            ok = xs[up | down].sum() <= g * wx.sum() and (1 - 2 * g) * wx.sum() <= xs.sum()
    return "stationary" if ok else "nonstationary"


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


class Trace:
    """Column store of trace rows (possibly subsampled)."""

    def __init__(self, rows_f: np.ndarray | None = None, rows_i: np.ndarray | None = None):
        self.rows_f = np.zeros((0, K.N_RF)) if rows_f is None else rows_f
        self.rows_i = np.zeros((0, K.N_RI), dtype=np.int64) if rows_i is None else rows_i

    @classmethod
    def concat(cls, parts: list[tuple[np.ndarray, np.ndarray]]) -> "Trace":
        if not parts:
            return cls()
        return cls(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))

    def __len__(self) -> int:
        return self.rows_f.shape[0]

    @property
    def rounds(self) -> np.ndarray:
        return self.rows_i[:, K.RI_ROUND]

    @property
    def objective(self) -> np.ndarray:
        return self.rows_f[:, K.RF_OBJ]

    @property
    def potential(self) -> np.ndarray:
        return self.rows_f[:, K.RF_POT]

    @property
    def gap(self) -> np.ndarray:
        return self.rows_f[:, K.RF_GAP]

    @property
    def max_violation(self) -> np.ndarray:
        return self.rows_f[:, K.RF_VIOL]

    @property
    def acs(self) -> np.ndarray:
        return self.rows_i[:, K.RI_ACS1:K.RI_ACS3 + 1].astype(bool)

    def record(self, k: int) -> RoundRecord:
        f, i = self.rows_f[k], self.rows_i[k]
        return RoundRecord(
            round_index=int(i[K.RI_ROUND]), objective=float(f[K.RF_OBJ]),
            potential=float(f[K.RF_POT]), duality_gap=float(f[K.RF_GAP]),
            max_violation=float(f[K.RF_VIOL]), count_increased=int(i[K.RI_INC]),
            count_decreased=int(i[K.RI_DEC]), count_clamped=int(i[K.RI_CLAMPED]),
            stationary=STATIONARY_LABELS[int(i[K.RI_STAT])],
            acs=(bool(i[K.RI_ACS1]), bool(i[K.RI_ACS2]), bool(i[K.RI_ACS3])))

    def records(self) -> Iterator[RoundRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for f, i in zip(self.rows_f.tolist(), self.rows_i.tolist()):
            writer.writerow([i[K.RI_ROUND], repr(f[K.RF_OBJ]), repr(f[K.RF_POT]),
                             repr(f[K.RF_GAP]), repr(f[K.RF_VIOL]), i[K.RI_INC], i[K.RI_DEC],
                             i[K.RI_CLAMPED], STATIONARY_LABELS[i[K.RI_STAT]],
                             i[K.RI_ACS1], i[K.RI_ACS2], i[K.RI_ACS3]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        """Writes the trace atomically as CSV."""
        atomic_write_text(path, self.to_csv_text())


def read_trace_csv(path) -> Trace:
    """Parses a trace CSV written by :meth:`Trace.to_csv`."""
    labels = {v: k for k, v in STATIONARY_LABELS.items()}
    fs, ints = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            fs.append([float(row["objective"]), float(row["potential"]), float(row["gap"]),
                       float(row["max_violation"])])
            ints.append([int(row["round"]), int(row["n_inc"]), int(row["n_dec"]),
                         int(row["n_clamped"]), labels[row["stationary"]], int(row["acs1"]),
                         int(row["acs2"]), int(row["acs3"])])
    return Trace(np.array(fs, dtype=float).reshape(-1, K.N_RF),
                 np.array(ints, dtype=np.int64).reshape(-1, K.N_RI))


# ---------------------------------------------------------------------------
# Engine shared by solve() and the harness
# ---------------------------------------------------------------------------


@dataclass
class InvariantReport:
    """Violation counts (and first offending round) per checked invariant."""

    counts: dict[str, int]
    first_round: dict[str, int]

    @property
    def ok(self) -> bool:
        return not any(self.counts.values())

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "first_round": dict(self.first_round), "ok": self.ok}


MaskSource = Callable[[int, int], np.ndarray]


class Engine:
    """Resumable driver around the compiled round loop.

    The engine owns the allocation and all per-run state.  Callers advance it
    with :meth:`advance` and may swap the problem between calls with
    :meth:`replace_problem`.

    Args:
        problem: Normalized problem.
        epsilon: Target accuracy (also the initial working accuracy).
        alpha: Effective alpha of the dynamics.
        x0: Starting point; defaults to ``delta``.
        fast_forward: Skip frozen single-direction stretches in closed form
            (synchronous rounds only).
        refine: Halve the working epsilon at uncertified quiescent points.
        stop_on_gap: Stop as soon as the gap certifies ``epsilon``.
        trace_every: Record a row at the first evaluated round of every
            window of this many rounds (plus stopping rounds).
        check_acs: Assert the slackness conditions after the warm-up.
        min_epsilon_ratio: Lower limit of the working epsilon relative to the
            target.
    """

    def __init__(self, problem: PackingProblem, epsilon: float, alpha: float, x0=None, *,
                 fast_forward: bool = True, refine: bool = True, stop_on_gap: bool = True,
                 trace_every: int = 1, check_acs: bool = True,
                 min_epsilon_ratio: float = 2.0 ** -12, row_capacity: int = 8192):
        if trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        self.problem = problem
        self.epsilon = float(epsilon)
        self.alpha = float(alpha)
        self.fast_forward = fast_forward
        self.refine = refine
        self.stop_on_gap = stop_on_gap
        self.trace_every = int(trace_every)
        self.check_acs = check_acs
        self.min_epsilon = self.epsilon * min_epsilon_ratio
        self.params = derive(problem, self.epsilon, self.alpha)
        self.initial_params = self.params
        n = problem.n
        self.x = np.array(self.params.delta if x0 is None else _alloc(problem, x0), dtype=np.float64)
        self.xi_prev = np.zeros(n)
        self.dec_prev = np.zeros(n, dtype=np.int8)
        self.best_x = self.x.copy()
        self.si = np.zeros(K.N_SI, dtype=np.int64)
        self.sf = np.zeros(K.N_SF)
        self.si[[K.S_WARMUP, K.S_PREV_T, K.S_BEST_T, K.S_FIRST_FEASIBLE, K.S_DEC_SAME]] = -1
        self.sf[K.SF_PREV_PHI] = np.nan
        self.sf[K.SF_BEST_RATIO] = np.inf
        self.inv_count = np.zeros(K.N_INV, dtype=np.int64)
        self.inv_first = np.full(K.N_INV, -1, dtype=np.int64)
        self.rows_f = np.zeros((row_capacity, K.N_RF))
        self.rows_i = np.zeros((row_capacity, K.N_RI), dtype=np.int64)
        self._parts: list[tuple[np.ndarray, np.ndarray]] = []
        self.stages: list[dict] = [self._stage_info("start")]
        self.wall_time = 0.0
        self._fpar = self._ipar = None
        self._pack()

    # -- state accessors -------------------------------------------------

    @property
    def round(self) -> int:
        return int(self.si[K.S_T])

    @property
    def best_round(self) -> int:
        return int(self.si[K.S_BEST_T])

    @property
    def best_ratio(self) -> float:
        return float(self.sf[K.SF_BEST_RATIO])

    @property
    def first_feasible_round(self) -> int:
        return int(self.si[K.S_FIRST_FEASIBLE])

    @property
    def evaluated_rounds(self) -> int:
        return int(self.si[K.S_EVALS])

    @property
    def jumps(self) -> int:
        return int(self.si[K.S_JUMPS])

    def invariants(self) -> InvariantReport:
        return InvariantReport(
            counts={k: int(v) for k, v in zip(INVARIANT_NAMES, self.inv_count)},
            first_round={k: int(v) for k, v in zip(INVARIANT_NAMES, self.inv_first)})

    def trace(self) -> Trace:
        self._flush()
        return Trace.concat(self._parts)

    # -- internals -------------------------------------------------------

    def _stage_info(self, reason: str) -> dict:
        p = self.params
        return {"round": self.round, "reason": reason, "epsilon": p.epsilon,
                "kappa": p.kappa, "beta1": p.beta1, "beta2": p.beta2,
                "tau0": p.tau0, "tau1": p.tau1}

    def _pack(self) -> None:
        p, prob = self.params, self.problem
        f = np.zeros(K.N_FPAR)
        f[K.F_ALPHA] = self.alpha
        f[K.F_LOGC] = p.log_C
        f[K.F_KAPPA] = p.kappa
        f[K.F_GAMMA] = p.gamma
        f[K.F_BETA1] = p.beta1
        f[K.F_BETA2] = p.beta2
        f[K.F_EPS_ALG] = p.epsilon
        f[K.F_EPS_STOP] = self.epsilon
        f[K.F_W] = prob.W
        f[K.F_TAU0] = p.tau0
        f[K.F_TAU1] = p.tau1
        self._fpar = f
        self._ipar = np.zeros(K.N_IPAR, dtype=np.int64)
        self._ipar[K.I_IS_LOG] = int(p.is_log)
        self._ipar[K.I_TRACE_EVERY] = self.trace_every

    def _new_stage(self, reason: str, reset_absorption: bool) -> None:
        self.si[K.S_STAGE_START] = self.round
        self.si[K.S_WARMUP] = -1
        self.si[K.S_PREV_VALID] = 0
        self.si[K.S_DEC_SAME] = -1
        if reset_absorption:
            self.si[K.S_ABSORBED] = 0
            self.si[K.S_FIRST_FEASIBLE] = -1
        elif self.si[K.S_ABSORBED] and self.check_acs:
            # the point is already feasible: the warm-up restarts now
            self.si[K.S_WARMUP] = self.round + math.ceil(self.params.tau0)
        self._pack()
        self.stages.append(self._stage_info(reason))

    def _flush(self) -> None:
        r = int(self.si[K.S_NROWS])
        if r:
            self._parts.append((self.rows_f[:r].copy(), self.rows_i[:r].copy()))
            self.si[K.S_NROWS] = 0

    # -- public control --------------------------------------------------

    def replace_problem(self, problem: PackingProblem, x=None, reason: str = "event") -> None:
        """Swaps in a new problem (and optionally a new point) between rounds.

        Constants are re-derived from scratch at the target epsilon and the
        carried-over point is clamped into the new box by the next round.
        """
        self.problem = problem
        self.params = derive(problem, self.epsilon, self.alpha)
        if x is not None:
            self.x = np.array(_alloc(problem, x), dtype=np.float64)
        if self.x.size != problem.n:
            raise ValueError("allocation does not match the new problem")
        n = problem.n
        if self.xi_prev.size != n:
            self.xi_prev = np.zeros(n)
            self.dec_prev = np.zeros(n, dtype=np.int8)
        self.best_x = self.x.copy()
        self.sf[K.SF_BEST_RATIO] = np.inf
        self.si[K.S_BEST_T] = -1
        self._new_stage(reason, reset_absorption=True)

    def set_point(self, x, reason: str = "reset") -> None:
        """Replaces the allocation between rounds (problem unchanged)."""
        self.x = np.array(_alloc(self.problem, x), dtype=np.float64)
        self.params = derive(self.problem, self.epsilon, self.alpha)
        self.best_x = self.x.copy()
        self.sf[K.SF_BEST_RATIO] = np.inf
        self.si[K.S_BEST_T] = -1
        self._new_stage(reason, reset_absorption=True)

    def idle_until(self, t: int) -> None:
        """Moves the round counter to ``t`` across a fixed point.

        Only valid after :meth:`advance` returned ``"stalled"``: no agent
        moves at a stalled point, so every skipped round would be identical.
        """
        self.si[K.S_T] = max(self.round, int(t))

    def advance(self, t_end: int, masks: MaskSource | None = None,
                mask_block: int = 4096) -> str:
        """Runs rounds until ``t_end``, certification, or a stall.

        Args:
            t_end: Exclusive round limit.
            masks: Optional activation source; ``masks(t0, t1)`` returns a
                ``(t1 - t0, n)`` uint8 array for rounds ``t0..t1-1``.
            mask_block: Rounds per mask request.

        Returns:
            ``"converged"``, ``"limit"`` or ``"stalled"``.
        """
        empty = np.zeros((0, self.problem.n), dtype=np.uint8)
        start = time.perf_counter()
        try:
            while True:
                t = self.round
                if t >= t_end:
                    return "limit"
                ip = self._ipar
                ip[K.I_STOP_ON_GAP] = int(self.stop_on_gap)
                ip[K.I_CHECK_ACS] = int(self.check_acs and masks is None)
                if masks is None:
                    ip[K.I_T_END] = t_end
                    ip[K.I_FAST_FORWARD] = int(self.fast_forward)
                    ip[K.I_HAS_MASK] = 0
                    ip[K.I_MASK_BASE] = 0
                    mk = empty
                else:
                    stop = min(t_end, t + mask_block)
                    mk = np.ascontiguousarray(masks(t, stop), dtype=np.uint8)
                    ip[K.I_T_END] = stop
                    ip[K.I_FAST_FORWARD] = 0
                    ip[K.I_HAS_MASK] = 1
                    ip[K.I_MASK_BASE] = t
                prob = self.problem
                status = K.run_block(
                    prob.indptr, prob.indices, prob.data, prob.col_ptr, prob.col_idx,
                    prob.col_data, prob.weights, self.params.delta, self._fpar, ip,
                    self.x, self.xi_prev, self.dec_prev, self.best_x, self.si, self.sf, mk,
                    self.rows_f, self.rows_i, self.inv_count, self.inv_first)
                if status == K.ST_FULL:
                    self._flush()
                elif status == K.ST_CONVERGED:
                    return "converged"
                elif status == K.ST_QUIESCENT:
                    if self.refine and self.params.epsilon / 2.0 >= self.min_epsilon:
                        eps = self.params.epsilon / 2.0
                        log.debug("round %d: no agent moves, gap uncertified; working "
                                  "epsilon -> %g", self.round, eps)
                        self.params = derive(self.problem, eps, self.alpha)
                        self._new_stage("refine", reset_absorption=False)
                    else:
                        return "stalled"
        finally:
            self.wall_time += time.perf_counter() - start


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


@dataclass
class SolveResult:
    """Outcome of :func:`solve`.

    Attributes:
        x: Best-gap allocation (normalized coordinates).
        allocation: The same as an :class:`Allocation` carrying the scale.
        final_x: Allocation at the last round.
        trace: Recorded rows.
        report: Serializable run report.
        params: Constants at the start of the run.
        final_params: Constants at the end (differs after continuation).
        regime: Regime dispatch outcome.
        stop_reason: ``"converged"``, ``"budget"`` or ``"stalled"``.
        rounds: Rounds applied.
        best_round: Round of the best certified gap ratio (-1 if none).
        invariants: Invariant violation counts.
    """

    x: np.ndarray
    allocation: Allocation
    final_x: np.ndarray
    trace: Trace
    report: dict
    params: SolverParams
    final_params: SolverParams
    regime: Regime
    stop_reason: str
    rounds: int
    best_round: int
    invariants: InvariantReport
    stages: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.stop_reason == "converged"


def prepare(problem, epsilon: float, alpha: float | None = None,
            clamp_epsilon: bool = False) -> tuple[PackingProblem, Regime, float]:
    """Normalizes, dispatches the regime and validates epsilon."""
    problem = coerce_problem(problem)
    alpha = float(problem.alpha if alpha is None else alpha)
    regime = dispatch_regime(problem, epsilon, alpha)
    if regime.mode is RegimeMode.TINY_ALPHA_LP:
        raise RegimeError(
            f"alpha={alpha:g} is at or below the linear threshold {regime.tiny_threshold:.4g}; "
            "solve the linear program instead")
    eps = validate_epsilon(epsilon, regime.effective_alpha, clamp=clamp_epsilon)
    return problem, regime, eps


def build_report(problem: PackingProblem, engine: Engine, regime: Regime, stop_reason: str) -> dict:
    """Assembles the run report from an engine's final state."""
    best_x = engine.best_x if engine.best_round >= 0 else engine.x
    a = engine.alpha
    gap = float("nan")
    try:
        y = compute_duals(problem, engine.params, best_x)
        if float(row_activity(problem, best_x).max()) <= 1.0:
            gap = duality_gap(problem, best_x, y, a)
    except (FloatRangeError, ValueError):
        pass
    return {
        "problem_hash": problem.content_hash(),
        "n": problem.n, "m": problem.m,
        "regime": regime.to_dict(),
        "epsilon": engine.epsilon,
        "params": engine.initial_params.to_dict(),
        "final_params": engine.params.to_dict(),
        "stages": engine.stages,
        "stop_reason": stop_reason,
        "rounds_used": engine.round,
        "evaluated_rounds": engine.evaluated_rounds,
        "fast_forward_jumps": engine.jumps,
        "best_round": engine.best_round,
        "best_gap": gap,
        "best_gap_ratio": engine.best_ratio,
        "best_objective": objective(problem, best_x, a),
        "first_feasible_round": engine.first_feasible_round,
        "wall_time_s": engine.wall_time,
        "invariants": engine.invariants().to_dict(),
        "x": [float(v) for v in best_x],
        "scale_c": problem.scale_c,
    }


def solve(problem, epsilon: float, *, alpha: float | None = None, x0=None,
          max_rounds: int | None = None, trace_every: int = 1, fast_forward: bool = True,
          refine: bool = True, stop_on_gap: bool = True, clamp_epsilon: bool = False,
          check_acs: bool = True) -> SolveResult:
    """Runs the round dynamics until the duality gap certifies ``epsilon``.

    The stop test is ``gap <= eps |p_alpha(x)|`` (alpha != 1) or
    ``gap <= eps W`` (alpha = 1) at a feasible point.

    Args:
        problem: Raw or normalized problem.
        epsilon: Target accuracy.
        alpha: Overrides the problem's alpha.
        x0: Starting point in normalized coordinates (default ``delta``).
        max_rounds: Round budget; defaults to ``50 ceil(tau0 + tau1)``.
        trace_every: Trace subsampling period.
        fast_forward: See :class:`Engine`.
        refine: See :class:`Engine`.
        stop_on_gap: If false, run the whole budget (still reporting the best
            point).
        clamp_epsilon: Clamp an inadmissible epsilon instead of raising.
        check_acs: Count slackness-condition violations after the warm-up.

    Returns:
        A :class:`SolveResult`; budget exhaustion is reported through
        ``stop_reason`` rather than raised.

    Raises:
        RegimeError: If alpha is in the linear regime.
        EpsilonError: If epsilon is inadmissible and not clamped.
    """
    problem, regime, eps = prepare(problem, epsilon, alpha, clamp_epsilon)
    engine = Engine(problem, eps, regime.effective_alpha, x0, fast_forward=fast_forward,
                    refine=refine, stop_on_gap=stop_on_gap, trace_every=trace_every,
                    check_acs=check_acs)
    budget = engine.params.default_budget() if max_rounds is None else int(max_rounds)
    status = engine.advance(budget)
    stop_reason = {"converged": "converged", "limit": "budget", "stalled": "stalled"}[status]
    if not stop_on_gap and engine.best_ratio <= 1.0:
        stop_reason = "converged"  # the full budget ran, but some round certified
    log.info("solve: %s after %d rounds (%d evaluated), best gap ratio %.4g",
             stop_reason, engine.round, engine.evaluated_rounds, engine.best_ratio)
    report = build_report(problem, engine, regime, stop_reason)
    best = engine.best_x.copy() if engine.best_round >= 0 else engine.x.copy()
    return SolveResult(
        x=best, allocation=Allocation(best, True, problem.scale_c), final_x=engine.x.copy(),
        trace=engine.trace(), report=report, params=engine.initial_params,
        final_params=engine.params, regime=regime, stop_reason=stop_reason,
        rounds=engine.round, best_round=engine.best_round, invariants=engine.invariants(),
        stages=list(engine.stages))


def round_update(problem: PackingProblem, params: SolverParams,
                 state: SolverState) -> tuple[SolverState, RoundRecord]:
    """Applies one synchronous round to ``state``.

    Uses the same compiled code path as :func:`solve`, so a sequence of
    ``round_update`` calls reproduces a solve run without fast-forward.
    """
    x = np.array(_alloc(problem, state.x), dtype=np.float64)
    n = problem.n
    si = np.zeros(K.N_SI, dtype=np.int64)
    si[[K.S_WARMUP, K.S_PREV_T, K.S_BEST_T, K.S_FIRST_FEASIBLE, K.S_DEC_SAME]] = -1
    si[K.S_T] = state.round_index
    si[K.S_NEXT_REC] = state.round_index
    sf = np.zeros(K.N_SF)
    sf[K.SF_BEST_RATIO] = np.inf
    f = np.zeros(K.N_FPAR)
    f[[K.F_ALPHA, K.F_LOGC, K.F_KAPPA, K.F_GAMMA, K.F_BETA1, K.F_BETA2, K.F_EPS_ALG,
       K.F_EPS_STOP, K.F_W, K.F_TAU0, K.F_TAU1]] = [
        params.alpha_effective, params.log_C, params.kappa, params.gamma, params.beta1,
        params.beta2, params.epsilon, params.epsilon, problem.W, params.tau0, params.tau1]
    ip = np.zeros(K.N_IPAR, dtype=np.int64)
    ip[K.I_IS_LOG] = int(params.is_log)
    ip[K.I_T_END] = state.round_index + 1
    ip[K.I_TRACE_EVERY] = 1
    rows_f = np.zeros((1, K.N_RF))
    rows_i = np.zeros((1, K.N_RI), dtype=np.int64)
    K.run_block(problem.indptr, problem.indices, problem.data, problem.col_ptr,
                problem.col_idx, problem.col_data, problem.weights, params.delta, f, ip, x,
                np.zeros(n), np.zeros(n, dtype=np.int8), np.zeros(n), si, sf,
                np.zeros((0, n), dtype=np.uint8), rows_f, rows_i, np.zeros(K.N_INV, dtype=np.int64),
                np.full(K.N_INV, -1, dtype=np.int64))
    record = Trace(rows_f, rows_i).record(0)
    act = row_activity(problem, x)
    y = np.empty(problem.m)
    K.duals(act, params.log_C, params.kappa, y)
    s = np.empty(n)
    K.column_dual_sums(problem.col_ptr, problem.col_idx, problem.col_data, y, s)
    xi = np.empty(n)
    K.kkt_ratios(x, s, problem.weights, params.alpha_effective, xi)
    return SolverState(x=x, y=y, xi=xi, round_index=state.round_index + 1), record


def initial_state(problem: PackingProblem, params: SolverParams, x0=None) -> SolverState:
    """State at the default (or given) starting point."""
    x = np.array(params.delta if x0 is None else _alloc(problem, x0), dtype=np.float64)
    act = row_activity(problem, x)
    y = np.empty(problem.m)
    K.duals(act, params.log_C, params.kappa, y)
    return SolverState(x=x, y=y, xi=kkt_ratio(problem, params, x, y), round_index=0)
