"""Stateless multiplicative-update solver for weighted alpha-fair packing."""

from alphafair.model import (
    Allocation,
    PackingProblem,
    ProblemError,
    RawProblem,
    load_problem,
    max_violation,
    normalize,
    objective,
    random_problem,
    row_activity,
    save_allocation,
    save_problem,
)
from alphafair.params import EpsilonError, FloatRangeError, SolverParams, derive, validate_epsilon

__all__ = [
    "Allocation",
    "EpsilonError",
    "FloatRangeError",
    "PackingProblem",
    "ProblemError",
    "RawProblem",
    "SolverParams",
    "derive",
    "load_problem",
    "max_violation",
    "normalize",
    "objective",
    "random_problem",
    "row_activity",
    "save_allocation",
    "save_problem",
    "validate_epsilon",
]

__version__ = "0.1.0"
