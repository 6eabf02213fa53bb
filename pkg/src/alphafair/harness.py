"""Experiment engine: agent schedules, mid-run perturbations and sweeps.

A run drives the round dynamics of :mod:`alphafair.solver` under a
:class:`Schedule` and applies :class:`PerturbationEvent` edits between rounds.
Because the dynamics are stateless, an event is just "a new problem and/or a
new point": the constants are re-derived and the rounds continue.  For every
event the run records how long it took to become feasible again and to
re-attain the stop criterion.

Asynchrony is modelled by independent Bernoulli activation: in each round
every agent applies its decision with probability ``q``; inactive agents
keep their value, and the duals are still recomputed from the whole vector.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from alphafair.model import (
    PackingProblem,
    ProblemError,
    RawProblem,
    atomic_write_text,
    coerce_problem,
    normalize,
)
from alphafair.solver import Engine, Trace, build_report, prepare

log = logging.getLogger(__name__)

SYNCHRONOUS = "synchronous"
ASYNC_SUBSET = "async_subset"

EVENT_KINDS = ("reset_x", "scale_x", "add_constraint", "remove_constraint", "set_weight")

# wall-clock time stays out of the table so identical inputs give identical bytes
SWEEP_COLUMNS = ("alpha", "epsilon", "stop_reason", "rounds_to_gap", "rounds",
                 "evaluated_rounds", "best_gap", "best_gap_ratio")


class EventError(ValueError):
    """Raised for a perturbation that would leave an invalid problem."""


@dataclass(frozen=True)
class Schedule:
    """Which agents update in each round.

    Attributes:
        mode: ``"synchronous"`` (everyone, every round) or ``"async_subset"``
            (each agent independently with probability ``q``).
        q: Activation probability; must be 1 in synchronous mode.
        seed: Seed of the activation stream.
    """

    mode: str = SYNCHRONOUS
    q: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (SYNCHRONOUS, ASYNC_SUBSET):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not (0.0 < self.q <= 1.0):
            raise ValueError(f"activation probability q must be in (0, 1], got {self.q}")
        if self.mode == SYNCHRONOUS and self.q != 1.0:
            raise ValueError("q applies only to async_subset mode (synchronous needs q = 1)")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed}")

    @property
    def is_async(self) -> bool:
        return self.mode == ASYNC_SUBSET

    def to_dict(self) -> dict:
        return {"mode": self.mode, "q": self.q, "seed": int(self.seed)}


class MaskStream:
    """Deterministic activation masks, generated one round after another.

    Round ``t``'s mask depends only on the seed and ``t``: rows are drawn
    sequentially from one generator and cached, so requests may restart
    anywhere at or after the oldest retained round.
    """

    def __init__(self, n: int, q: float, seed: int, chunk: int = 4096):
        self.n = n
        self.q = q
        self.rng = np.random.default_rng(seed)
        self.chunk = chunk
        self.base = 0
        self.buf = np.zeros((0, n), dtype=np.uint8)

    def _draw(self, rows: int) -> np.ndarray:
        return (self.rng.random((rows, self.n)) < self.q).astype(np.uint8)

    def __call__(self, t0: int, t1: int) -> np.ndarray:
        if t0 < self.base:
            raise ValueError(f"mask for round {t0} was already discarded")
        drop = t0 - self.base
        if drop >= len(self.buf):
            skip = drop - len(self.buf)
            while skip > 0:
                k = min(skip, self.chunk)
                self._draw(k)
                skip -= k
            self.buf = np.zeros((0, self.n), dtype=np.uint8)
        else:
            self.buf = self.buf[drop:]
        self.base = t0
        need = (t1 - t0) - len(self.buf)
        if need > 0:
            self.buf = np.concatenate([self.buf, self._draw(need)])
        return self.buf[:t1 - t0]


@dataclass(frozen=True)
class PerturbationEvent:
    """An edit applied between rounds ``at_round - 1`` and ``at_round``.

    Payload keys by kind:

    * ``reset_x``: ``values`` (scalar or length-``n`` list, normalized
      coordinates of the current problem);
    * ``scale_x``: ``factor``;
    * ``add_constraint``: ``coefficients`` (length-``n`` list in raw
      coordinates, zeros meaning absent) and optional ``b`` (default 1);
    * ``remove_constraint``: ``index``;
    * ``set_weight``: ``agent`` and ``weight``.
    """

    at_round: int
    kind: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise EventError(f"unknown event kind {self.kind!r}")
        if int(self.at_round) != self.at_round or self.at_round < 0:
            raise EventError(f"event round must be a nonnegative integer, got {self.at_round}")

    @property
    def structural(self) -> bool:
        """Whether the event changes the problem (not just the point)."""
        return self.kind in ("add_constraint", "remove_constraint", "set_weight")

    def to_dict(self) -> dict:
        return {"at_round": int(self.at_round), "kind": self.kind, **self.payload}

    @classmethod
    def from_dict(cls, doc: dict) -> "PerturbationEvent":
        """Parses ``{"at_round", "kind", ...payload keys}``.

        The payload keys may also be nested under a ``"payload"`` object.
        """
        if not isinstance(doc, dict):
            raise EventError("event must be an object")
        doc = dict(doc)
        try:
            at, kind = doc.pop("at_round"), doc.pop("kind")
        except KeyError as exc:
            raise EventError(f"event is missing {exc.args[0]!r}") from None
        nested = doc.pop("payload", {})
        if not isinstance(nested, dict):
            raise EventError("event payload must be an object")
        return cls(int(at), str(kind), {**nested, **doc})


def _edited_raw(raw: RawProblem, event: PerturbationEvent) -> RawProblem:
    """Applies a structural event to the raw problem."""
    p = event.payload
    entries = list(raw.entries)
    weights = list(raw.weights)
    b = list(raw.b)
    m = raw.m
    try:
        if event.kind == "add_constraint":
            coef = np.asarray(p["coefficients"], dtype=float)
            if coef.shape != (raw.n,):
                raise EventError(f"add_constraint needs {raw.n} coefficients, got {coef.size}")
            if np.any(coef < 0) or not np.any(coef > 0):
                raise EventError("add_constraint needs nonnegative coefficients, not all zero")
            entries += [(m, int(j), float(coef[j])) for j in np.flatnonzero(coef)]
            b.append(float(p.get("b", 1.0)))
            m += 1
        elif event.kind == "remove_constraint":
            i = int(p["index"])
            if not 0 <= i < m:
                raise EventError(f"remove_constraint index {i} out of range for m={m}")
            if m == 1:
                raise EventError("cannot remove the only constraint")
            entries = [(r - (r > i), j, v) for r, j, v in entries if r != i]
            del b[i]
            m -= 1
        elif event.kind == "set_weight":
            j = int(p["agent"])
            if not 0 <= j < raw.n:
                raise EventError(f"set_weight agent {j} out of range for n={raw.n}")
            weights[j] = float(p["weight"])
    except KeyError as exc:
        raise EventError(f"{event.kind} event is missing {exc.args[0]!r}") from None
    try:
        return RawProblem(raw.n, m, tuple(weights), raw.alpha, tuple(entries), tuple(b), raw.name)
    except ProblemError as exc:
        raise EventError(f"invalid {event.kind} event at round {event.at_round}: {exc}") from exc


def _event_point(engine: Engine, event: PerturbationEvent) -> np.ndarray:
    p = event.payload
    try:
        if event.kind == "reset_x":
            x = np.broadcast_to(np.asarray(p["values"], dtype=float), (engine.problem.n,)).copy()
        else:
            x = engine.x * float(p["factor"])
    except KeyError as exc:
        raise EventError(f"{event.kind} event is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise EventError(f"invalid {event.kind} payload: {exc}") from exc
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise EventError(f"{event.kind} must produce a positive finite point")
    return x


@dataclass
class Recovery:
    """How the run responded to one event.

    Attributes:
        event: The event.
        rounds_to_feasible: Rounds from the event to the first feasible
            round (0 if the first post-event round is feasible).
        rounds_to_certify: Rounds from the event to the first round whose
            gap certifies the target accuracy; ``None`` if it never did.
        feasibility_bound: ``ceil(tau1) + 1`` under the post-event constants.
        budget: Round budget granted after the event.
    """

    event: PerturbationEvent
    rounds_to_feasible: int | None
    rounds_to_certify: int | None
    feasibility_bound: int
    budget: int

    @property
    def feasible_in_bound(self) -> bool:
        return self.rounds_to_feasible is not None and \
            self.rounds_to_feasible <= self.feasibility_bound

    def to_dict(self) -> dict:
        return {"event": self.event.to_dict(), "rounds_to_feasible": self.rounds_to_feasible,
                "rounds_to_certify": self.rounds_to_certify,
                "feasibility_bound": self.feasibility_bound, "budget": self.budget,
                "feasible_in_bound": self.feasible_in_bound}


@dataclass
class ExperimentResult:
    """Outcome of :func:`run`.

    Attributes:
        trace: Recorded rows, strictly increasing in round.
        checkpoints: Allocation just before each event and at the end,
            keyed by round.
        stop_reason: ``"converged"``, ``"budget"`` or ``"stalled"`` for the
            final phase.
        rounds: Rounds applied in total.
        certified_round: First certifying round of the final phase (-1 if
            none).
        recoveries: One entry per event.
        wall_time_per_round: Seconds per applied round.
        report: Final solver report (best point of the final phase).
        problem: Problem in force at the end.
        schedule: The schedule used.
    """

    trace: Trace
    checkpoints: dict
    stop_reason: str
    rounds: int
    certified_round: int
    recoveries: list
    wall_time_per_round: float
    report: dict
    problem: PackingProblem
    schedule: Schedule

    @property
    def converged(self) -> bool:
        return self.stop_reason == "converged"

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.report["x"])

    def summary(self) -> dict:
        return {"stop_reason": self.stop_reason, "rounds": self.rounds,
                "certified_round": self.certified_round,
                "wall_time_per_round": self.wall_time_per_round,
                "schedule": self.schedule.to_dict(),
                "recoveries": [r.to_dict() for r in self.recoveries],
                "report": self.report}


def _certify_round(engine: Engine, t_end: int, masks, stop_on_gap: bool) -> tuple[str, int]:
    """Advances to ``t_end`` or certification; returns (status, round)."""
    engine.stop_on_gap = stop_on_gap
    status = engine.advance(t_end, masks)
    return status, (engine.round if status == "converged" else -1)


def run(problem, epsilon: float, schedule: Schedule | None = None, events=(),
        budget: int | None = None, *, alpha: float | None = None, x0=None,
        trace_every: int = 1, fast_forward: bool = True, refine: bool = True,
        check_acs: bool = True, clamp_epsilon: bool = False) -> ExperimentResult:
    """Runs the dynamics under a schedule with mid-run perturbations.

    Every phase (the start and each event) gets a fresh budget: ``budget``
    rounds if given, else the default budget of that phase's constants.  A
    phase followed by another event always runs up to the event round (the
    dynamics keep reacting after certification); the last phase stops at
    certification or when its budget runs out.

    Args:
        problem: Raw or normalized problem.
        epsilon: Target accuracy (the stop criterion of :func:`solve`).
        schedule: Activation schedule (default synchronous).
        events: Events sorted by ``at_round``.
        budget: Rounds per phase.
        alpha: Overrides the problem's alpha.
        x0: Starting point (normalized coordinates).
        trace_every, fast_forward, refine, check_acs: As for the solver.
            Fast-forward and the slackness checks only apply to synchronous
            rounds.
        clamp_epsilon: Clamp an inadmissible epsilon instead of raising.

    Returns:
        An :class:`ExperimentResult`.

    Raises:
        EventError: For unsorted or invalid events.
    """
    schedule = schedule or Schedule()
    events = [e if isinstance(e, PerturbationEvent) else PerturbationEvent.from_dict(e)
              for e in events]
    if any(a.at_round > b.at_round for a, b in zip(events, events[1:])):
        raise EventError("events must be sorted by round")
    raw = problem if isinstance(problem, RawProblem) else coerce_problem(problem).to_raw()
    norm, regime, eps = prepare(problem, epsilon, alpha, clamp_epsilon)
    if alpha is not None:
        raw = raw.with_alpha(alpha)
    engine = Engine(norm, eps, regime.effective_alpha, x0, fast_forward=fast_forward,
                    refine=refine, trace_every=trace_every, check_acs=check_acs)
    masks = MaskStream(norm.n, schedule.q, schedule.seed) if schedule.is_async else None

    def phase_budget() -> int:
        return engine.params.default_budget() if budget is None else int(budget)

    checkpoints: dict[int, list] = {}
    recoveries: list[Recovery] = []
    phase_start, phase_len = 0, phase_budget()
    pending: Recovery | None = None
    cert = -1
    status = "limit"
    for event in events + [None]:
        last = event is None
        limit = phase_start + phase_len
        if last:
            status, cert = _certify_round(engine, limit, masks, True)
        else:
            status, cert = _certify_round(engine, min(limit, event.at_round), masks, True)
            if status != "converged" and engine.round < event.at_round:
                # budget exhausted or stalled: keep the dynamics running
                # (uncounted) until the event
                status = engine.advance(event.at_round, masks)
            elif status == "converged":
                engine.stop_on_gap = False
                status = engine.advance(event.at_round, masks)
            if status == "stalled":
                engine.idle_until(event.at_round)
        if pending is not None:
            ff = engine.first_feasible_round
            pending.rounds_to_feasible = None if ff < 0 else ff - pending.event.at_round
            pending.rounds_to_certify = None if cert < 0 else cert - pending.event.at_round
            recoveries.append(pending)
            pending = None
        if last:
            break

        checkpoints[engine.round] = engine.x.tolist()
        if event.structural:
            old_c = engine.problem.scale_c
            raw = _edited_raw(raw, event)
            new = normalize(raw)
            engine.replace_problem(new, engine.x / old_c * new.scale_c, reason=event.kind)
        else:
            engine.set_point(_event_point(engine, event), reason=event.kind)
        log.info("round %d: applied %s", engine.round, event.kind)
        phase_start, phase_len = event.at_round, phase_budget()
        pending = Recovery(event, None, None, math.ceil(engine.params.tau1) + 1, phase_len)

    stop_reason = {"converged": "converged", "limit": "budget", "stalled": "stalled"}[status]
    checkpoints[engine.round] = engine.x.tolist()
    report = build_report(engine.problem, engine, regime, stop_reason)
    rounds = max(engine.round, 1)
    return ExperimentResult(
        trace=engine.trace(), checkpoints=checkpoints, stop_reason=stop_reason,
        rounds=engine.round, certified_round=cert, recoveries=recoveries,
        wall_time_per_round=engine.wall_time / rounds, report=report,
        problem=engine.problem, schedule=schedule)


# ---------------------------------------------------------------------------
# sweeps and scenario files
# ---------------------------------------------------------------------------


def _sweep_cell(args) -> dict:
    problem, alpha, eps, schedule, budget, clamp = args
    res = run(problem, eps, schedule, (), budget, alpha=alpha, trace_every=1 << 30,
              clamp_epsilon=clamp)
    rep = res.report
    return {"alpha": float(alpha), "epsilon": float(rep["epsilon"]),
            "stop_reason": res.stop_reason,
            "rounds_to_gap": res.certified_round if res.converged else -1,
            "rounds": res.rounds, "evaluated_rounds": rep["evaluated_rounds"],
            "best_gap": rep["best_gap"], "best_gap_ratio": rep["best_gap_ratio"],
            "wall_time_s": rep["wall_time_s"]}


def sweep(problem, epsilon_list, alpha_list, schedule: Schedule | None = None, *,
          budget: int | None = None, jobs: int = 1, clamp_epsilon: bool = False) -> list[dict]:
    """Runs one experiment per (alpha, epsilon) cell.

    Cells are independent; with ``jobs > 1`` they run in worker processes.
    The table is ordered alpha-major regardless of ``jobs``, and every cell
    uses the same schedule seed, so the result is deterministic.

    Returns:
        Rows with the keys of :data:`SWEEP_COLUMNS` plus ``wall_time_s``
        (``rounds_to_gap`` is -1 when the cell did not certify).
    """
    schedule = schedule or Schedule()
    problem = coerce_problem(problem)
    cells = [(problem, float(a), float(e), schedule, budget, clamp_epsilon)
             for a in alpha_list for e in epsilon_list]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    # the epsilon-halving sanity check is logged, not asserted
    by_alpha: dict[float, list[dict]] = {}
    for r in rows:
        by_alpha.setdefault(r["alpha"], []).append(r)
    for a, rs in by_alpha.items():
        rs = sorted((r for r in rs if r["rounds_to_gap"] >= 0), key=lambda r: -r["epsilon"])
        for hi, lo in zip(rs, rs[1:]):
            if lo["rounds_to_gap"] < hi["rounds_to_gap"]:
                log.info("alpha=%g: eps %g certified in fewer rounds (%d) than eps %g (%d)",
                         a, lo["epsilon"], lo["rounds_to_gap"], hi["epsilon"],
                         hi["rounds_to_gap"])
    return rows


def table_to_csv_text(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def write_table(rows: list[dict], path, columns=SWEEP_COLUMNS) -> None:
    """Writes a summary table as CSV (atomically)."""
    atomic_write_text(path, table_to_csv_text(rows, columns))


@dataclass
class Scenario:
    """Contents of a scenario file.

    Attributes:
        schedule: Activation schedule.
        events: Perturbations, sorted by round.
        budget: Rounds per phase (``None``: default budget).
        epsilon, alpha: Optional defaults for the run.
    """

    schedule: Schedule
    events: list
    budget: int | None = None
    epsilon: float | None = None
    alpha: float | None = None


def scenario_from_dict(doc) -> Scenario:
    if not isinstance(doc, dict):
        raise EventError("malformed scenario: top level must be an object")
    try:
        sched = doc.get("schedule", {})
        mode = sched.get("mode", SYNCHRONOUS)
        mode = {"sync": SYNCHRONOUS, "async": ASYNC_SUBSET}.get(mode, mode)
        schedule = Schedule(mode, float(sched.get("q", 1.0)), int(sched.get("seed", 0)))
        events = sorted((PerturbationEvent.from_dict(e) for e in doc.get("events", [])),
                        key=lambda e: e.at_round)
        budget = doc.get("budget")
        eps = doc.get("epsilon")
        alpha = doc.get("alpha")
        return Scenario(schedule, events, None if budget is None else int(budget),
                        None if eps is None else float(eps),
                        None if alpha is None else float(alpha))
    except (TypeError, AttributeError) as exc:
        raise EventError(f"malformed scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    """Reads a scenario file (JSON object with schedule, events, budget)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise EventError(f"malformed scenario file {path}: {exc}") from exc
    return scenario_from_dict(doc)
