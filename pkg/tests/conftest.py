"""Shared fixtures and instance builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from alphafair.model import RawProblem, normalize, random_problem

#: (criterion, passed, detail) tuples collected by the acceptance tests and
#: printed in the terminal summary, one line per criterion.
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


#: (title, text) diagnostic tables printed after the criteria lines.
DIAGNOSTIC_TABLES: list[tuple[str, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES.append((name, bool(passed), detail))


def record_table(title: str, text: str) -> None:
    DIAGNOSTIC_TABLES.append((title, text))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name, passed, detail in ACCEPTANCE_LINES:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    for title, text in DIAGNOSTIC_TABLES:
        terminalreporter.section(title)
        for line in text.rstrip("\n").splitlines():
            terminalreporter.write_line(line)


def simplex(weights, alpha: float = 1.0):
    """The normalized problem ``sum_j x_j <= 1`` with the given weights."""
    n = len(weights)
    return normalize(RawProblem.from_dense(np.ones((1, n)), weights=weights, alpha=alpha))


def dense_problem(A, weights=None, alpha: float = 1.0, b=None):
    return normalize(RawProblem.from_dense(A, b=b, weights=weights, alpha=alpha))


def corpus(seed: int, count: int, *, n_max: int = 10, m_max: int = 6, n_min: int = 2,
           m_min: int = 1, alpha: float = 1.0):
    """Random desk-scale instances: A_ij in [1, 4], w_j in [1, 5]."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        n = int(rng.integers(n_min, n_max + 1))
        m = int(rng.integers(m_min, m_max + 1))
        p = random_problem(rng, n, m, alpha=alpha)
        out.append(p)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
