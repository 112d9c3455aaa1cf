"""Batched gradient descent with per-row backtracking.

Rows of the variable are independent problems.  The objective is called as
``fun(x, rows)`` where ``x`` holds the rows listed in the index array
``rows`` and must return one value per row, so the gradient of their sum
holds each row's own gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import diffmath as dm


def values_and_grads(fun: Callable, x: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tape = dm.Tape()
    node = tape.variable(x, name="x")
    out = fun(node, rows)
    grads = dm.backward(tape, dm.sum(out))
    return np.array(out.value, dtype=np.float64), grads["x"]


@dataclass
class DescentResult:
    x: np.ndarray  # best iterate per row
    value: np.ndarray  # objective at ``x``
    initial_value: np.ndarray
    trace: np.ndarray  # (steps + 1, B), non-increasing along axis 0


def backtracking_descent(
    fun: Callable,
    x0: np.ndarray,
    steps: int,
    step_size: float,
    project: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    max_halvings: int = 50,
) -> DescentResult:
    """Projected gradient descent; each step halves the trial length until the objective decreases.

    A successful step doubles the next trial length.  A row that cannot
    decrease within ``max_halvings`` is treated as converged and frozen, so
    the trace never increases.  ``project(x, rows)`` maps candidate rows
    back onto the feasible set.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x = np.array(x0, dtype=np.float64)
    all_rows = np.arange(len(x))
    f, g = values_and_grads(fun, x, all_rows)
    initial = f.copy()
    t = np.full(len(x), float(step_size))
    trace = [f.copy()]
    active = np.ones(len(x), dtype=bool)
    for _ in range(steps):
        pending = active.copy()
        for _ in range(max_halvings):
            rows = np.flatnonzero(pending)
            if rows.size == 0:
                break
            cand = x[rows] - t[rows, None] * g[rows]
            if project is not None:
                cand = project(cand, rows)
            fc, gc = values_and_grads(fun, cand, rows)
            ok = fc < f[rows]
            acc = rows[ok]
            x[acc], f[acc], g[acc] = cand[ok], fc[ok], gc[ok]
            t[acc] *= 2.0
            t[rows[~ok]] *= 0.5
            pending[acc] = False
        # rows that found no decrease at any length are at a (projected) stationary point
        active &= ~pending
        trace.append(f.copy())
    return DescentResult(x, f, initial, np.array(trace))
