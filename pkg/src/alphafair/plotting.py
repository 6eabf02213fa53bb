"""Figures rendered to files next to the delimited outputs.

Uses matplotlib's object-oriented API with the Agg canvas, so nothing here
touches global pyplot state or needs a display.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from alphafair.model import temporary_sibling
from alphafair.solver import Trace


def _save(fig: Figure, path) -> None:
    """Renders ``fig`` to ``path`` atomically; the format follows the suffix."""
    FigureCanvasAgg(fig)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = temporary_sibling(path)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def plot_trace(trace: Trace, path, *, title: str | None = None, epsilon: float | None = None,
               gap_scale: float | None = None) -> None:
    """Objective, potential, duality gap and violation against the round.

    Args:
        trace: Recorded rows.
        path: Output image path (``.png``, ``.pdf``, ``.svg``...).
        title: Optional figure title.
        epsilon: When given, the gap panel also shows the relative gap
            against ``epsilon``.
        gap_scale: Normalizer of the relative gap; ``None`` means
            ``|objective|`` (pass ``W`` for alpha = 1, matching the stop
            criterion).
    """
    fig = Figure(figsize=(8, 6.5))
    axes = fig.subplots(3, 1, sharex=True)
    t = trace.rounds
    ax = axes[0]
    ax.plot(t, trace.objective, label="objective", lw=1.2)
    ax.plot(t, trace.potential, label="potential", lw=1.0, ls="--")
    ax.set_ylabel("value")
    ax.legend(loc="best", fontsize="small")
    ax = axes[1]
    gap = trace.gap
    ok = np.isfinite(gap) & (gap > 0)
    if ok.any():
        ax.semilogy(t[ok], gap[ok], lw=1.2, label="duality gap")
        if epsilon is not None:
            if gap_scale is None:
                rel = gap[ok] / np.maximum(np.abs(trace.objective[ok]), 1e-300)
                label = "gap / |objective|"
            else:
                rel, label = gap[ok] / gap_scale, "gap / W"
            ax.semilogy(t[ok], rel, lw=1.0, ls="--", label=label)
            ax.axhline(epsilon, color="k", lw=0.8, ls=":", label="epsilon")
        ax.legend(loc="best", fontsize="small")
    ax.set_ylabel("gap")
    ax = axes[2]
    ax.plot(t, trace.max_violation, lw=1.0)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_ylabel("max(Ax) - 1")
    ax.set_xlabel("round")
    if len(t) and t[-1] > 10_000:  # fast-forwarded runs span many decades
        for a in axes:
            a.set_xscale("symlog", linthresh=1.0)
            a.set_xlim(left=0.0)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_sweep(rows: list[dict], path, *, title: str | None = None) -> None:
    """Rounds-to-gap against 1/epsilon on log axes, one line per alpha."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.subplots()
    by_alpha: dict[float, list[tuple[float, int]]] = {}
    for r in rows:
        if r["rounds_to_gap"] > 0:
            by_alpha.setdefault(r["alpha"], []).append((1.0 / r["epsilon"], r["rounds_to_gap"]))
    for a, pts in sorted(by_alpha.items()):
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"alpha={a:g}")
    ax.set_xlabel("1 / epsilon")
    ax.set_ylabel("rounds to certified gap")
    if by_alpha:
        ax.legend(loc="best", fontsize="small")
    if title:
        ax.set_title(title)
    _save(fig, path)
