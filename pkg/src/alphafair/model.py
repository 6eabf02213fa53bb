"""Problem representation for weighted alpha-fair packing.

A raw problem is ``max sum_j w_j f_alpha(x_j)`` subject to ``A x <= b`` and
``x >= 0``.  Everything downstream works on the *normalized* form in which the
right-hand side is the all-ones vector and every stored coefficient is at
least one.  Normalization divides each row by its right-hand side and then
rescales the variables by a single factor ``c``; a normalized allocation
``x_hat`` maps back to raw coordinates as ``x_hat / c``.

Sparse matrices are kept in two sorted compressed views (by row and by
column) because the solver sweeps both constraints and agents in its inner
loop.  All sums run in ascending index order so that results are
bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from alphafair import _kernels


class ProblemError(ValueError):
    """Raised for malformed or degenerate problem definitions."""


# ---------------------------------------------------------------------------
# Raw problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawProblem:
    """An un-normalized packing problem ``A x <= b``.

    Attributes:
        n: Number of variables (agents).
        m: Number of constraints.
        weights: Positive weights, length ``n``.
        alpha: Fairness parameter (positive).
        entries: Tuple of ``(i, j, A_ij)`` triples with ``A_ij > 0``.
        b: Strictly positive right-hand side, length ``m``.
        name: Optional label carried through file I/O.
    """

    n: int
    m: int
    weights: tuple[float, ...]
    alpha: float
    entries: tuple[tuple[int, int, float], ...]
    b: tuple[float, ...]
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(
            self,
            "entries",
            tuple((int(i), int(j), float(v)) for i, j, v in self.entries),
        )
        _check_raw(self)

    @classmethod
    def from_dense(cls, A, b=None, weights=None, alpha: float = 1.0, name=None) -> "RawProblem":
        """Builds a problem from a dense coefficient matrix.

        Zeros in ``A`` are treated as absent entries.  ``b`` defaults to ones
        and ``weights`` to ones.
        """
        A = np.atleast_2d(np.asarray(A, dtype=float))
        m, n = A.shape
        b = np.ones(m) if b is None else np.asarray(b, dtype=float)
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        rows, cols = np.nonzero(A)
        entries = tuple((int(i), int(j), float(A[i, j])) for i, j in zip(rows, cols))
        return cls(n=n, m=m, weights=tuple(weights), alpha=float(alpha),
                   entries=entries, b=tuple(b), name=name)

    def dense(self) -> np.ndarray:
        """Returns the coefficient matrix as a dense ``m x n`` array."""
        A = np.zeros((self.m, self.n))
        for i, j, v in self.entries:
            A[i, j] = v
        return A

    def with_alpha(self, alpha: float) -> "RawProblem":
        return RawProblem(self.n, self.m, self.weights, float(alpha), self.entries, self.b, self.name)


def _check_raw(raw: RawProblem) -> None:
    if raw.n < 1 or raw.m < 1:
        raise ProblemError(f"degenerate problem: n={raw.n}, m={raw.m} (need n, m >= 1)")
    if len(raw.weights) != raw.n:
        raise ProblemError(f"dimension mismatch: {len(raw.weights)} weights for n={raw.n}")
    if len(raw.b) != raw.m:
        raise ProblemError(f"dimension mismatch: {len(raw.b)} rhs values for m={raw.m}")
    if not (math.isfinite(raw.alpha) and raw.alpha > 0):
        raise ProblemError(f"alpha must be a positive finite number, got {raw.alpha}")
    for j, w in enumerate(raw.weights):
        if not (math.isfinite(w) and w > 0):
            raise ProblemError(f"nonpositive weight w[{j}] = {w}")
    for i, v in enumerate(raw.b):
        if not (math.isfinite(v) and v > 0):
            raise ProblemError(f"nonpositive rhs b[{i}] = {v}")
    seen = set()
    covered = np.zeros(raw.n, dtype=bool)
    for i, j, v in raw.entries:
        if not (0 <= i < raw.m and 0 <= j < raw.n):
            raise ProblemError(f"entry ({i}, {j}) out of range for m={raw.m}, n={raw.n}")
        if not (math.isfinite(v) and v > 0):
            raise ProblemError(f"entry ({i}, {j}) has nonpositive value {v}")
        if (i, j) in seen:
            raise ProblemError(f"duplicate entry ({i}, {j})")
        seen.add((i, j))
        covered[j] = True
    if not covered.all():
        j = int(np.flatnonzero(~covered)[0])
        raise ProblemError(f"unconstrained variable {j}: column has no entries")


# ---------------------------------------------------------------------------
# Normalized problem
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PackingProblem:
    """A normalized packing problem ``A x <= 1`` with stored ``A_ij >= 1``.

    Instances are immutable: the arrays are flagged read-only so the object
    can be shared freely.  Use :func:`normalize` to construct one.

    Attributes:
        n: Number of variables.
        m: Number of constraints.
        weights: Weight vector ``w``.
        alpha: Fairness parameter carried from the raw problem.
        indptr, indices, data: Row-compressed matrix, column indices sorted.
        col_ptr, col_idx, col_data: Column-compressed matrix, row indices sorted.
        scale_c: Factor mapping normalized to raw variables (``x_raw = x / c``).
        name: Optional label.
    """

    n: int
    m: int
    weights: np.ndarray
    alpha: float
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    col_ptr: np.ndarray
    col_idx: np.ndarray
    col_data: np.ndarray
    scale_c: float = 1.0
    name: str | None = None
    # Derived statistics, filled in __post_init__.
    A_max: float = field(init=False)
    w_max: float = field(init=False)
    w_min: float = field(init=False)
    W: float = field(init=False)
    R_w: float = field(init=False)
    row_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("weights", "data", "col_data"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("indptr", "indices", "col_ptr", "col_idx"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        w = self.weights
        object.__setattr__(self, "A_max", float(self.data.max()))
        object.__setattr__(self, "w_max", float(w.max()))
        object.__setattr__(self, "w_min", float(w.min()))
        object.__setattr__(self, "W", float(_kernels.seq_sum(w)))
        object.__setattr__(self, "R_w", self.w_max / self.w_min)
        object.__setattr__(self, "row_counts", _frozen(np.diff(self.indptr)))

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def dense(self) -> np.ndarray:
        """Returns the normalized matrix as a dense ``m x n`` array."""
        A = np.zeros((self.m, self.n))
        for i in range(self.m):
            cols = self.indices[self.indptr[i]:self.indptr[i + 1]]
            A[i, cols] = self.data[self.indptr[i]:self.indptr[i + 1]]
        return A

    def to_raw(self) -> RawProblem:
        """Views the normalized problem as a raw one with unit right-hand side."""
        entries = []
        for i in range(self.m):
            for k in range(self.indptr[i], self.indptr[i + 1]):
                entries.append((i, int(self.indices[k]), float(self.data[k])))
        return RawProblem(self.n, self.m, tuple(self.weights.tolist()), self.alpha,
                          tuple(entries), (1.0,) * self.m, self.name)

    def with_alpha(self, alpha: float) -> "PackingProblem":
        """Returns a copy that differs only in ``alpha``."""
        return PackingProblem(self.n, self.m, self.weights, float(alpha), self.indptr,
                              self.indices, self.data, self.col_ptr, self.col_idx,
                              self.col_data, self.scale_c, self.name)

    def content_hash(self) -> str:
        """SHA-256 over the normalized definition (stable across runs)."""
        h = hashlib.sha256()
        h.update(np.array([self.n, self.m], dtype=np.int64).tobytes())
        h.update(np.float64(self.alpha).tobytes())
        for a in (self.weights, self.indptr, self.indices, self.data):
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Allocation:
    """A nonnegative allocation vector with its coordinate system.

    Attributes:
        x: Values, length ``n``.
        normalized: True when ``x`` is in normalized coordinates.
        scale_c: Normalization factor of the problem it belongs to.
    """

    x: np.ndarray
    normalized: bool = True
    scale_c: float = 1.0

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("allocation must be one-dimensional")
        if np.any(x < 0) or not np.all(np.isfinite(x)):
            raise ValueError("allocation entries must be finite and nonnegative")
        object.__setattr__(self, "x", _frozen(x))

    def raw(self) -> np.ndarray:
        """Values in raw (un-normalized) coordinates."""
        return self.x / self.scale_c if self.normalized else self.x.copy()


def _from_triplets(n, m, weights, alpha, rows, cols, vals, scale_c, name) -> PackingProblem:
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(m, n))
    csr = mat.tocsr()
    csr.sort_indices()
    csc = mat.tocsc()
    csc.sort_indices()
    return PackingProblem(n=n, m=m, weights=np.asarray(weights, dtype=float), alpha=float(alpha),
                          indptr=csr.indptr, indices=csr.indices, data=csr.data,
                          col_ptr=csc.indptr, col_idx=csc.indices, col_data=csc.data,
                          scale_c=float(scale_c), name=name)


def normalize(raw: RawProblem) -> PackingProblem:
    """Scales a raw problem to the normalized form.

    Each row is divided by its right-hand side; then the variables are scaled
    by ``c = min(1, min_ij A_ij / b_i)`` so that every stored coefficient is at
    least one.  Feasibility maps as ``x_raw feasible  <=>  c * x_raw feasible``.

    Args:
        raw: A validated raw problem.

    Returns:
        The normalized problem, recording ``c`` as ``scale_c``.
    """
    if not isinstance(raw, RawProblem):
        raise TypeError("normalize expects a RawProblem")
    rows = np.array([e[0] for e in raw.entries], dtype=np.int64)
    cols = np.array([e[1] for e in raw.entries], dtype=np.int64)
    vals = np.array([e[2] for e in raw.entries], dtype=float)
    b = np.asarray(raw.b, dtype=float)
    ratio = vals / b[rows]
    c = min(1.0, float(ratio.min()))
    scaled = ratio / c
    return _from_triplets(raw.n, raw.m, raw.weights, raw.alpha, rows, cols, scaled, c, raw.name)


def to_raw_allocation(problem: PackingProblem, x) -> np.ndarray:
    """Maps a normalized allocation back to raw coordinates."""
    return np.asarray(x, dtype=float) / problem.scale_c


def random_problem(rng: np.random.Generator, n: int, m: int, *, density: float = 0.5,
                   a_range=(1.0, 4.0), w_range=(1.0, 5.0), alpha: float = 1.0,
                   name: str | None = None) -> PackingProblem:
    """Draws a random normalized instance.

    Each entry is present with probability ``density``; columns left empty
    receive one entry in a uniformly chosen row, and empty rows receive one
    entry in a uniformly chosen column.  Values are uniform in ``a_range``
    (which must lie in ``[1, inf)``) and weights uniform in ``w_range``.
    """
    mask = rng.random((m, n)) < density
    for j in range(n):
        if not mask[:, j].any():
            mask[rng.integers(m), j] = True
    for i in range(m):
        if not mask[i].any():
            mask[i, rng.integers(n)] = True
    A = np.where(mask, rng.uniform(*a_range, size=(m, n)), 0.0)
    w = rng.uniform(*w_range, size=n)
    return normalize(RawProblem.from_dense(A, weights=w, alpha=alpha, name=name))


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


def _as_allocation(problem: PackingProblem, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != problem.n:
        raise ValueError(f"allocation length {x.size} does not match n={problem.n}")
    return x


def row_activity(problem: PackingProblem, x) -> np.ndarray:
    """Returns ``A x`` with ascending-index summation in each row."""
    x = _as_allocation(problem, x)
    out = np.empty(problem.m)
    _kernels.row_activity(problem.indptr, problem.indices, problem.data, x, out)
    return out


def max_violation(problem: PackingProblem, x) -> float:
    """Returns ``max_i (A x)_i - 1``; nonpositive exactly when ``x`` is feasible."""
    return float(row_activity(problem, x).max() - 1.0)


def objective(problem: PackingProblem, x, alpha: float | None = None) -> float:
    """Evaluates ``p_alpha(x) = sum_j w_j f_alpha(x_j)``.

    Args:
        problem: The problem supplying the weights.
        x: Nonnegative allocation.
        alpha: Overrides ``problem.alpha`` (the solver passes its effective
            alpha here).  The logarithmic branch is used iff ``alpha == 1.0``.

    Returns:
        The objective value; ``-inf`` when some ``x_j = 0`` and ``alpha >= 1``.
    """
    x = _as_allocation(problem, x)
    if np.any(x < 0):
        raise ValueError("allocation has negative entries")
    a = problem.alpha if alpha is None else float(alpha)
    return float(_kernels.objective(problem.weights, x, a, a == 1.0))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def temporary_sibling(path) -> Path:
    """A fresh, unused file name next to ``path`` (same suffix).

    Unlike :func:`tempfile.mkstemp`, the file is created with ``open(...,
    "x")`` semantics by the caller, so the usual umask-derived permissions
    apply to the final file.
    """
    path = Path(path)
    return path.with_name(f".{path.stem}.{os.getpid()}.{uuid.uuid4().hex[:12]}{path.suffix}")


def atomic_write_text(path, text: str) -> None:
    """Writes ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = temporary_sibling(path)
    try:
        with open(tmp, "x", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def problem_to_dict(raw: RawProblem) -> dict:
    doc = {
        "alpha": raw.alpha,
        "weights": list(raw.weights),
        "b": list(raw.b),
        "entries": [[i, j, v] for i, j, v in raw.entries],
    }
    if raw.name is not None:
        doc["name"] = raw.name
    return doc


def problem_from_dict(doc) -> RawProblem:
    """Parses the problem document format into a :class:`RawProblem`."""
    if not isinstance(doc, dict):
        raise ProblemError("malformed problem file: top level must be an object")
    missing = [k for k in ("alpha", "weights", "b", "entries") if k not in doc]
    if missing:
        raise ProblemError(f"malformed problem file: missing key(s) {', '.join(missing)}")
    try:
        weights = [float(v) for v in doc["weights"]]
        b = [float(v) for v in doc["b"]]
        entries = []
        for e in doc["entries"]:
            if len(e) != 3:
                raise ProblemError(f"malformed entry {e!r}: expected [i, j, value]")
            i, j, v = e
            if int(i) != i or int(j) != j:
                raise ProblemError(f"malformed entry {e!r}: indices must be integers")
            entries.append((int(i), int(j), float(v)))
        alpha = float(doc["alpha"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProblemError):
            raise
        raise ProblemError(f"malformed problem file: {exc}") from exc
    name = doc.get("name")
    return RawProblem(n=len(weights), m=len(b), weights=tuple(weights), alpha=alpha,
                      entries=tuple(entries), b=tuple(b), name=None if name is None else str(name))


def load_problem(path) -> RawProblem:
    """Reads a problem file (JSON)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"malformed problem file {path}: {exc}") from exc
    return problem_from_dict(doc)


def save_problem(raw: RawProblem, path) -> None:
    """Writes a problem file atomically."""
    atomic_write_text(path, json.dumps(problem_to_dict(raw), indent=1) + "\n")


def allocation_to_dict(x, *, normalized: bool, scale_c: float, method: str | None = None,
                       extra: dict | None = None) -> dict:
    doc = {"x": [float(v) for v in np.asarray(x, dtype=float)],
           "normalized": bool(normalized), "scale_c": float(scale_c)}
    if method is not None:
        doc["method"] = method
    if extra:
        doc.update(extra)
    return doc


def save_allocation(x, path, *, normalized: bool = True, scale_c: float = 1.0,
                    method: str | None = None, extra: dict | None = None) -> None:
    """Writes an allocation file atomically."""
    doc = allocation_to_dict(x, normalized=normalized, scale_c=scale_c, method=method, extra=extra)
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_allocation(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "x" not in doc:
        raise ProblemError(f"malformed allocation file {path}: missing 'x'")
    doc["x"] = np.asarray(doc["x"], dtype=float)
    if np.any(doc["x"] < 0):
        raise ProblemError(f"allocation file {path} has negative entries")
    return doc


def file_hash(path) -> str:
    """SHA-256 of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def coerce_problem(problem) -> PackingProblem:
    """Accepts either form and returns the normalized problem."""
    if isinstance(problem, PackingProblem):
        return problem
    if isinstance(problem, RawProblem):
        return normalize(problem)
    raise TypeError(f"expected RawProblem or PackingProblem, got {type(problem).__name__}")

