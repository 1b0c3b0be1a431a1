"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

CONVERGED = "converged"
MAX_ITER = "max-iter"
LINE_SEARCH_FAILURE = "line-search-failure"
STALLED = "stalled"        # relative decrease below ftol (only when ftol > 0)


@dataclass
class OptReport:
    x: np.ndarray
    fun: float
    grad_norm: float       # infinity norm of the final gradient
    iterations: int
    evaluations: int
    reason: str

    @property
    def converged(self) -> bool:
        return self.reason == CONVERGED


class _Counted:
    def __init__(self, fun: Objective):
        self.fun = fun
        self.count = 0

    def __call__(self, x):
        self.count += 1
        f, g = self.fun(x)
        return float(f), np.asarray(g, dtype=float)


def _finite(f, g) -> bool:
    return math.isfinite(f) and bool(np.all(np.isfinite(g)))


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga), (b, fb, gb); None if degenerate."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    den = gb - ga + 2.0 * d2
    if den == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / den


def _zoom(phi, lo, hi, f0, g0, c1, c2, max_steps=30):
    """Refine a bracket [lo, hi] (each (alpha, f, dphi, x, g)) to a strong-Wolfe point."""
    for _ in range(max_steps):
        a_lo, f_lo, d_lo = lo[:3]
        a_hi, f_hi, d_hi = hi[:3]
        a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        lo_b, hi_b = min(a_lo, a_hi), max(a_lo, a_hi)
        width = hi_b - lo_b
        if a is None or not (lo_b + 0.1 * width <= a <= hi_b - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        trial = phi(a)
        if trial is None:
            hi = (a, math.inf, 0.0, None, None)
            continue
        _, f, d = trial[:3]
        if f > f0 + c1 * a * g0 or f >= f_lo:
            hi = trial
        else:
            if abs(d) <= -c2 * g0:
                return trial
            if d * (a_hi - a_lo) >= 0:
                hi = lo
            lo = trial
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    # best point with sufficient decrease, if any
    if lo[0] > 0 and lo[1] <= f0 + c1 * lo[0] * g0:
        return lo
    return None


def line_search(fun, x, f0, g, p, alpha0=1.0, c1=1e-4, c2=0.9, max_steps=30):
    """Strong-Wolfe step along ``p``; returns (alpha, f, x_new, g_new) or None.

    Trial points with a non-finite objective are treated as overshoots and
    the step is contracted.
    """
    g0 = float(g @ p)
    if not g0 < 0:
        return None

    def phi(a):
        xn = x + a * p
        f, gn = fun(xn)
        if not _finite(f, gn):
            return None
        return (a, f, float(gn @ p), xn, gn)

    prev = (0.0, f0, g0, x, g)
    a = alpha0
    for i in range(max_steps):
        trial = phi(a)
        if trial is None:
            a = 0.5 * (prev[0] + a) if prev[0] > 0 else 0.1 * a
            if a < 1e-20:
                return None
            continue
        _, f, d = trial[:3]
        if f > f0 + c1 * a * g0 or (i > 0 and f >= prev[1]):
            res = _zoom(phi, prev, trial, f0, g0, c1, c2)
            break
        if abs(d) <= -c2 * g0:
            res = trial
            break
        if d >= 0:
            res = _zoom(phi, trial, prev, f0, g0, c1, c2)
            break
        prev = trial
        a = 2.0 * a
    else:
        res = prev if prev[0] > 0 else None
    if res is None:
        return None
    return res[0], res[1], res[3], res[4]


def minimize(fun: Objective, x0, memory: int = 8, gtol: float = 1e-5, max_iters: int = 60,
             c1: float = 1e-4, c2: float = 0.9, ftol: float = 0.0, past: int = 3) -> OptReport:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Terminates when the gradient infinity norm drops to ``gtol``, when the
    relative decrease over the last ``past`` iterations falls below ``ftol``
    (disabled by default), after ``max_iters`` iterations, or when a line
    search fails (including a non-finite objective at the start point).
    """
    if memory < 1:
        raise ValueError("memory must be >= 1")
    if not gtol > 0:
        raise ValueError("gtol must be positive")
    f_eval = _Counted(fun)
    x = np.array(x0, dtype=float)
    f, g = f_eval(x)
    if not _finite(f, g):
        return OptReport(x, f, math.inf, 0, f_eval.count, LINE_SEARCH_FAILURE)
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    history = deque([f], maxlen=past + 1)
    it = 0
    reason = MAX_ITER
    while True:
        if gnorm <= gtol:
            reason = CONVERGED
            break
        if ftol > 0 and len(history) > past and \
                history[0] - f <= ftol * max(1.0, abs(f)):
            reason = STALLED
            break
        if it >= max_iters:
            reason = MAX_ITER
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        p = -q
        if not float(g @ p) < 0:
            p = -g
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))
        res = line_search(f_eval, x, f, g, p, alpha0, c1, c2)
        if res is None:
            reason = LINE_SEARCH_FAILURE
            break
        _, f_new, x_new, g_new = res
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.max(np.abs(g)))
        history.append(f)
        it += 1
    return OptReport(x, f, gnorm, it, f_eval.count, reason)
