"""Box-constrained limited-memory BFGS with gradient projection.

Minimizes a smooth function subject to per-coordinate interval bounds.
The search direction is built by the standard two-loop recursion on the
free coordinates (a coordinate sitting on a bound with the gradient
pushing outward counts as active and is frozen for that iteration);
candidate points are clipped onto the box; an Armijo backtracking line
search with step expansion guarantees monotone decrease along accepted
steps.  If the quasi-Newton direction fails to produce an acceptable
step the iteration retries once with projected steepest descent.
Convergence is measured by the infinity norm of the projected gradient
``x - clip(x - g, lo, hi)``.

Everything is deterministic: fixed memory (10 pairs), fixed line-search
schedule, no randomness.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

__all__ = ["BoxResult", "minimize_box_lbfgs"]

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 40
_MAX_EXPANSIONS = 25
_CURVATURE_EPS = 1e-12


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    pg_norm: float
    converged: bool


def _two_loop(g, pairs):
    """Standard L-BFGS two-loop recursion for -H*g."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize_box_lbfgs(fun, x0, lower, upper, gtol=1e-6, max_iter=200, memory=10):
    """Minimize ``fun(x) -> (value, gradient)`` over the box [lower, upper].

    Raises :class:`~articulate.errors.NumericError` if the objective or
    its gradient goes non-finite.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.clip(np.asarray(x0, dtype=np.float64), lower, upper)

    def evaluate(z):
        f, g = fun(z)
        if not np.isfinite(f) or not np.isfinite(g).all():
            raise NumericError("non-finite objective or gradient")
        return float(f), np.asarray(g, dtype=np.float64)

    def line_search(d):
        """Armijo with expansion along the clipped path; None on failure."""
        step = 1.0
        x_new = np.clip(x + step * d, lower, upper)
        if np.abs(x_new - x).max() == 0.0:
            return None
        f_new, g_new = evaluate(x_new)
        if f_new <= f + _ARMIJO_C1 * min(g @ (x_new - x), 0.0):
            accepted = (x_new, f_new, g_new)
            for _ in range(_MAX_EXPANSIONS):
                step *= 2.0
                x_try = np.clip(x + step * d, lower, upper)
                if np.array_equal(x_try, accepted[0]):
                    break  # box saturated
                f_try, g_try = evaluate(x_try)
                if (f_try <= f + _ARMIJO_C1 * min(g @ (x_try - x), 0.0)
                        and f_try < accepted[1]):
                    accepted = (x_try, f_try, g_try)
                else:
                    break
            return accepted
        for _ in range(_MAX_BACKTRACKS):
            step *= 0.5
            x_new = np.clip(x + step * d, lower, upper)
            if np.abs(x_new - x).max() == 0.0:
                return None
            f_new, g_new = evaluate(x_new)
            if f_new <= f + _ARMIJO_C1 * min(g @ (x_new - x), 0.0):
                return (x_new, f_new, g_new)
        return None

    f, g = evaluate(x)
    pairs: deque = deque(maxlen=memory)
    iterations = 0

    for iterations in range(1, max_iter + 1):
        pg = x - np.clip(x - g, lower, upper)
        if np.abs(pg).max() <= gtol:
            iterations -= 1
            break

        active = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        g_eff = np.where(active, 0.0, g)
        if pairs:
            d = _two_loop(g_eff, pairs)
            d[active] = 0.0
            if d @ g_eff >= 0:
                pairs.clear()
                d = -g_eff
        else:
            d = -g_eff

        accepted = line_search(d)
        if accepted is None and pairs:
            pairs.clear()  # quasi-Newton step failed; retry with steepest descent
            accepted = line_search(-g_eff)
        if accepted is None:
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sty = s @ y
        if sty > _CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sty))
        else:
            pairs.clear()  # stale curvature would stall progress
        x, f, g = x_new, f_new, g_new

    # accepted steps never increase f, so the last iterate is the best
    pg = x - np.clip(x - g, lower, upper)
    pg_norm = float(np.abs(pg).max()) if pg.size else 0.0
    return BoxResult(
        x=x,
        fun=f,
        grad=g,
        iterations=iterations,
        pg_norm=pg_norm,
        converged=pg_norm <= gtol,
    )
