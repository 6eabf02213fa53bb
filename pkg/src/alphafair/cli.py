"""Command-line entry point.

Subcommands::

    alphafair solve    --problem P --eps E [--alpha A] [--mode sync|async --q Q --seed S]
                       [--max-rounds N] [--trace T.csv --trace-every K] [--report R.json]
                       [--output X.json] [--figure F.png]
    alphafair oracle   --problem P [--alpha A] --method barrier|closed-form|mmf|lp [--output X.json]
    alphafair check    --problem P --lemma lower-bound|lp-approx|near-one|mmf-limit
                       [--eps E] [--alpha A] [--output L.csv]
    alphafair scenario --problem P --events S.json [--eps E] [--trace T.csv] [--report R.json]
    alphafair sweep    --problem P --eps E1 E2 ... --alpha A1 A2 ... [--jobs J] [--output S.csv]

Exit codes: 0 success / converged / check passed, 1 input error, 2 round
budget exhausted or stalled (results are still written), 3 a structural
check failed.  Set ``ALPHA_FAIR_LOG=debug|info`` for diagnostics on
standard error; data only ever goes to files or standard output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from alphafair import analysis, harness, oracle
from alphafair.model import (
    ProblemError,
    atomic_write_text,
    file_hash,
    load_problem,
    normalize,
    objective,
    save_allocation,
)
from alphafair.params import EpsilonError, FloatRangeError
from alphafair.solver import RegimeError, RegimeMode, dispatch_regime, solve

log = logging.getLogger("alphafair")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_BUDGET = 2
EXIT_CHECK_FAILED = 3


class InputError(Exception):
    """A user-facing input problem; the message names the flag or file."""


def _configure_logging() -> None:
    level = os.environ.get("ALPHA_FAIR_LOG", "").strip().lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_problem(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", required=True, metavar="PATH", help="problem file (JSON)")
    p.add_argument("--alpha", type=float, help="override the problem's alpha")


def _add_schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("sync", "async"), help="agent schedule (default sync)")
    p.add_argument("--q", type=float, help="activation probability (async mode only)")
    p.add_argument("--seed", type=int, help="seed of the activation stream (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alphafair",
                                     description="Weighted alpha-fair packing solver.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the round dynamics to a certified gap")
    _add_problem(p)
    p.add_argument("--eps", type=float, required=True, help="target accuracy")
    _add_schedule(p)
    p.add_argument("--max-rounds", type=_positive_int, help="round budget")
    p.add_argument("--trace", metavar="PATH", help="trace CSV output")
    p.add_argument("--trace-every", type=_positive_int, default=1, metavar="K",
                   help="record one trace row per K rounds (default 1)")
    p.add_argument("--report", metavar="PATH", help="run report (JSON)")
    p.add_argument("--output", metavar="PATH", help="allocation output (JSON)")
    p.add_argument("--figure", metavar="PATH", help="render the trace to an image file")
    p.add_argument("--clamp-eps", action="store_true",
                   help="clamp an inadmissible epsilon instead of failing")

    p = sub.add_parser("oracle", help="reference optimum")
    _add_problem(p)
    p.add_argument("--method", choices=("barrier", "closed-form", "mmf", "lp"),
                   default="barrier")
    p.add_argument("--output", metavar="PATH", help="allocation output (JSON)")

    p = sub.add_parser("check", help="structural bound check")
    _add_problem(p)
    p.add_argument("--lemma", required=True, choices=analysis.LEMMA_IDS)
    p.add_argument("--eps", type=float, help="accuracy (all checks but lower-bound)")
    p.add_argument("--output", metavar="PATH", help="lemma report CSV (default stdout)")

    p = sub.add_parser("scenario", help="run with perturbation events")
    _add_problem(p)
    p.add_argument("--events", required=True, metavar="PATH", help="scenario file (JSON)")
    p.add_argument("--eps", type=float, help="target accuracy (overrides the scenario)")
    _add_schedule(p)
    p.add_argument("--max-rounds", type=_positive_int, help="round budget per phase")
    p.add_argument("--trace", metavar="PATH")
    p.add_argument("--trace-every", type=_positive_int, default=1, metavar="K")
    p.add_argument("--report", metavar="PATH")
    p.add_argument("--figure", metavar="PATH")

    p = sub.add_parser("sweep", help="grid of runs over alpha and epsilon")
    p.add_argument("--problem", required=True, metavar="PATH")
    p.add_argument("--eps", type=float, nargs="+", required=True)
    p.add_argument("--alpha", type=float, nargs="*", help="alphas (default: the problem's)")
    _add_schedule(p)
    p.add_argument("--max-rounds", type=_positive_int, help="round budget per cell")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--output", metavar="PATH", help="summary table CSV (default stdout)")
    p.add_argument("--figure", metavar="PATH")
    p.add_argument("--clamp-eps", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(path: str):
    try:
        return load_problem(path)
    except FileNotFoundError:
        raise InputError(f"--problem {path}: file not found") from None
    except (ProblemError, OSError) as exc:
        raise InputError(f"--problem {path}: {exc}") from None


def _schedule(args, base: harness.Schedule | None = None) -> harness.Schedule:
    base = base or harness.Schedule()
    mode = base.mode if args.mode is None else (
        harness.ASYNC_SUBSET if args.mode == "async" else harness.SYNCHRONOUS)
    if args.q is not None and mode != harness.ASYNC_SUBSET:
        raise InputError("--q: only valid with --mode async")
    q = args.q if args.q is not None else (base.q if mode == base.mode else
                                           (0.5 if mode == harness.ASYNC_SUBSET else 1.0))
    seed = base.seed if args.seed is None else args.seed
    try:
        return harness.Schedule(mode, q, seed)
    except ValueError as exc:
        flag = "--seed" if "seed" in str(exc) else "--q"
        raise InputError(f"{flag}: {exc}") from None


def _write_json(path: str, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _exit_for(stop_reason: str) -> int:
    return EXIT_OK if stop_reason == "converged" else EXIT_BUDGET


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _solve_lp(args, problem, regime) -> int:
    """Tiny alpha: the weighted linear program is the eps-approximation."""
    z, value = oracle.lp_solve(problem)
    report = {"problem_file": args.problem, "problem_file_hash": file_hash(args.problem),
              "problem_hash": problem.content_hash(), "regime": regime.to_dict(),
              "epsilon": args.eps, "method": "lp", "stop_reason": "converged",
              "lp_value": value, "x": z.tolist(), "scale_c": problem.scale_c,
              "objective": objective(problem, z, regime.requested_alpha) if np.all(z > 0) else None}
    if args.report:
        _write_json(args.report, report)
    if args.output:
        save_allocation(z, args.output, normalized=True, scale_c=problem.scale_c, method="lp")
    _emit({"stop_reason": "converged", "method": "lp", "lp_value": value})
    return EXIT_OK


def cmd_solve(args) -> int:
    raw = _load(args.problem)
    problem = normalize(raw)
    alpha = raw.alpha if args.alpha is None else args.alpha
    schedule = _schedule(args)
    try:
        regime = dispatch_regime(problem, args.eps, alpha)
    except FloatRangeError as exc:
        raise InputError(f"--problem {args.problem}: {exc}") from None
    if regime.mode is RegimeMode.TINY_ALPHA_LP:
        if problem.n > 12 or problem.m > 12:
            raise InputError(f"--alpha {alpha:g}: at or below the linear threshold "
                             f"{regime.tiny_threshold:.4g}, and the instance is too large for "
                             "the enumeration LP (n, m <= 12)")
        return _solve_lp(args, problem, regime)
    if schedule.is_async:
        res = harness.run(problem, args.eps, schedule, (), args.max_rounds, alpha=alpha,
                          trace_every=args.trace_every, clamp_epsilon=args.clamp_eps)
        report, trace, stop = res.report, res.trace, res.stop_reason
        report["schedule"] = schedule.to_dict()
    else:
        res = solve(problem, args.eps, alpha=alpha, max_rounds=args.max_rounds,
                    trace_every=args.trace_every, clamp_epsilon=args.clamp_eps)
        report, trace, stop = res.report, res.trace, res.stop_reason
    report["problem_file"] = args.problem
    report["problem_file_hash"] = file_hash(args.problem)
    if args.trace:
        trace.to_csv(args.trace)
    if args.report:
        _write_json(args.report, report)
    if args.output:
        save_allocation(report["x"], args.output, normalized=True, scale_c=problem.scale_c,
                        method="rounds", extra={"stop_reason": stop})
    if args.figure:
        from alphafair.plotting import plot_trace
        is_log = report["regime"]["effective_alpha"] == 1.0
        plot_trace(trace, args.figure, epsilon=report["epsilon"],
                   gap_scale=problem.W if is_log else None,
                   title=f"alpha={report['regime']['effective_alpha']:g}, "
                         f"eps={report['epsilon']:g}")
    _emit({"stop_reason": stop, "rounds": report["rounds_used"],
           "best_round": report["best_round"], "best_gap_ratio": report["best_gap_ratio"],
           "best_objective": report["best_objective"]})
    if stop != "converged":
        log.warning("round budget exhausted (%s) after %d rounds", stop, report["rounds_used"])
    return _exit_for(stop)


def cmd_oracle(args) -> int:
    raw = _load(args.problem)
    problem = normalize(raw)
    alpha = raw.alpha if args.alpha is None else args.alpha
    extra: dict = {"alpha": alpha}
    code = EXIT_OK
    if args.method == "barrier":
        sol = oracle.barrier_solve(problem, alpha)
        x = sol.x_star
        extra.update({"kkt_residual": sol.kkt_residual, "converged": sol.converged,
                      "y": sol.y_star.tolist()})
        code = EXIT_OK if sol.converged else EXIT_BUDGET
    elif args.method == "closed-form":
        if problem.m != 1:
            raise InputError(f"--method closed-form: needs a single constraint, "
                             f"{args.problem} has m={problem.m}")
        x = oracle.single_constraint_closed_form(problem.weights, problem.dense()[0], alpha)
    elif args.method == "mmf":
        x = oracle.max_min_fair(problem)
    else:
        if problem.n > 12 or problem.m > 12:
            raise InputError("--method lp: the enumeration LP is limited to n, m <= 12")
        x, value = oracle.lp_solve(problem)
        extra["lp_value"] = value
    if args.output:
        save_allocation(x, args.output, normalized=True, scale_c=problem.scale_c,
                        method=args.method, extra=extra)
    _emit({"method": args.method, "x": [float(v) for v in x], **extra})
    return code


def cmd_check(args) -> int:
    raw = _load(args.problem)
    problem = normalize(raw)
    if args.lemma != "lower-bound" and args.eps is None:
        raise InputError(f"--eps: required for --lemma {args.lemma}")
    try:
        rep = analysis.run_check(args.lemma, problem, args.eps, args.alpha)
    except ValueError as exc:
        flag = "--eps" if args.eps is not None and "eps" in str(exc) else "--problem"
        raise InputError(f"{flag}: {exc}") from None
    if args.output:
        analysis.write_reports([rep], args.output)
    else:
        sys.stdout.write(analysis.reports_to_csv_text([rep]))
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_scenario(args) -> int:
    raw = _load(args.problem)
    try:
        sc = harness.load_scenario(args.events)
    except FileNotFoundError:
        raise InputError(f"--events {args.events}: file not found") from None
    except (harness.EventError, ValueError) as exc:
        raise InputError(f"--events {args.events}: {exc}") from None
    eps = args.eps if args.eps is not None else sc.epsilon
    if eps is None:
        raise InputError("--eps: required (the scenario file does not set epsilon)")
    alpha = args.alpha if args.alpha is not None else sc.alpha
    schedule = _schedule(args, sc.schedule)
    budget = args.max_rounds if args.max_rounds is not None else sc.budget
    try:
        res = harness.run(raw, eps, schedule, sc.events, budget, alpha=alpha,
                          trace_every=args.trace_every)
    except harness.EventError as exc:
        raise InputError(f"--events {args.events}: {exc}") from None
    summary = res.summary()
    summary["problem_file"] = args.problem
    summary["problem_file_hash"] = file_hash(args.problem)
    if args.trace:
        res.trace.to_csv(args.trace)
    if args.report:
        _write_json(args.report, summary)
    if args.figure:
        from alphafair.plotting import plot_trace
        plot_trace(res.trace, args.figure, epsilon=eps, title="scenario")
    _emit({"stop_reason": res.stop_reason, "rounds": res.rounds,
           "recoveries": [r.to_dict() for r in res.recoveries]})
    return _exit_for(res.stop_reason)


def cmd_sweep(args) -> int:
    raw = _load(args.problem)
    alphas = args.alpha if args.alpha is not None else [raw.alpha]
    schedule = _schedule(args)
    rows = harness.sweep(raw, args.eps, alphas, schedule, budget=args.max_rounds,
                         jobs=args.jobs, clamp_epsilon=args.clamp_eps)
    if args.output:
        harness.write_table(rows, args.output)
    else:
        sys.stdout.write(harness.table_to_csv_text(rows))
    if args.figure:
        from alphafair.plotting import plot_sweep
        plot_sweep(rows, args.figure)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "check": cmd_check,
            "scenario": cmd_scenario, "sweep": cmd_sweep}


def main(argv=None) -> int:
    """Runs the command line; returns the exit code."""
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"alphafair {args.command}: error: {exc}", file=sys.stderr)
    except EpsilonError as exc:
        print(f"alphafair {args.command}: error: --eps: {exc}", file=sys.stderr)
    except RegimeError as exc:
        print(f"alphafair {args.command}: error: --alpha: {exc}", file=sys.stderr)
    except FloatRangeError as exc:
        print(f"alphafair {args.command}: error: --problem: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"alphafair {args.command}: error: {exc.filename or ''}: {exc.strerror}",
              file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
