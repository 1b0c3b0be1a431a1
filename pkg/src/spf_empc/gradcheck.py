"""Finite-difference checks of the trajectory and cost gradients on random instances."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from . import minco
from .costs import TERMS, CostContext, CostProblem, CostWeights, find_guidance
from .spf import SpfParams, build_field
from .world import BoxObstacle, CircleObstacle, ObstacleState

TOLERANCE = 1e-5

CHECK_WEIGHTS = CostWeights(smooth=1.0, feasible=10.0, time=2.0, swarm=10.0, static=10.0,
                            dynamic=10.0, d_saf=0.5, swarm_clearance=1.5, static_clearance=0.8,
                            v_max=1.0, a_max=1.0, t_max=1.2)


@dataclass
class GradcheckReport:
    trials: int
    errors: dict          # term name -> max relative error
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failing


def random_instance(rng: np.random.Generator):
    """Random cluttered planning instance: trajectory, context with >= 2 obstacles, weights."""
    N = int(rng.integers(2, 7))
    k = int(rng.integers(1, 5))
    start, goal = np.zeros(2), np.array([6.0, 0.0])
    P = np.linspace(start, goal, N + 1)[1:-1] + rng.normal(0, 0.3, (N - 1, 2))
    T = rng.uniform(0.5, 1.5, N)
    head = np.array([start, rng.normal(0, 0.5, 2), rng.normal(0, 0.5, 2)])
    tail = np.array([goal, np.zeros(2), np.zeros(2)])
    traj = minco.build(head, tail, P, T, k)
    statics = (BoxObstacle(rng.uniform([1, -1], [5, 1]), [0.4, 0.3]),
               CircleObstacle(rng.uniform([1, -1], [5, 1]), 0.4))
    mid = np.linspace([6.0, 0.1], [0.0, 0.2], 4)[1:-1] + rng.normal(0, 0.2, (2, 2))
    other = minco.build([[6.0, 0.1]], [[0.0, 0.2]], mid, rng.uniform(1, 2, 3))
    others = (SimpleNamespace(trajectory=other, start_time=float(rng.uniform(-1, 1))),)
    fields = [build_field(ObstacleState(rng.uniform([1, -1], [5, 1]), rng.normal(0, 0.5, 2), 0.3),
                          SpfParams()) for _ in range(2)]
    pairs = tuple(find_guidance(traj, fields))
    return traj, CostContext(0.3, others, statics, pairs), CHECK_WEIGHTS


def fd_error(fun, x, rel_step: float = 1e-6) -> float:
    """max |g_fd - g| / max |g_fd| with central differences."""
    _, g = fun(x)
    fd = np.empty_like(x)
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (fun(xp)[0] - fun(xm)[0]) / (2 * h)
    scale = float(np.max(np.abs(fd)))
    diff = float(np.max(np.abs(fd - g)))
    if scale < 1e-10:
        return diff
    return diff / scale


def _isolated(weights: CostWeights, term: str) -> CostWeights:
    zero = {name: 0.0 for name in TERMS}
    zero[term] = getattr(weights, term)
    return replace(weights, **zero)


def _minco_error(traj: minco.Trajectory, rng: np.random.Generator) -> float:
    """propagate_gradient of a random quadratic in C against finite differences over (P, T)."""
    Q = rng.normal(size=traj.coeffs.shape)

    def fun(x):
        n_p = traj.waypoints.size
        P = x[:n_p].reshape(traj.waypoints.shape)
        T = x[n_p:]
        tr = minco.build(traj.head, traj.tail, P, T, traj.samples_per_segment)
        value = 0.5 * float(np.sum(Q * tr.coeffs**2)) + float(np.sum(T**2))
        gP, gT = minco.propagate_gradient(tr, Q * tr.coeffs, 2.0 * T)
        return value, np.concatenate([gP.ravel(), gT])

    return fd_error(fun, np.concatenate([traj.waypoints.ravel(), traj.durations]))


def run_gradcheck(trials: int = 100, seed: int = 0) -> GradcheckReport:
    """Check every cost term, the total cost and the MINCO propagation on random instances."""
    rng = np.random.default_rng(seed)
    errors = {"minco": 0.0, **{t: 0.0 for t in TERMS}, "total": 0.0}
    t0 = time.perf_counter()
    for _ in range(trials):
        traj, ctx, w = random_instance(rng)
        errors["minco"] = max(errors["minco"], _minco_error(traj, rng))
        checks = [(t, _isolated(w, t)) for t in TERMS] + [("total", w)]
        for name, wt in checks:
            prob = CostProblem(traj.head, traj.tail, traj.n_segments, ctx, wt,
                               traj.samples_per_segment)
            errors[name] = max(errors[name], fd_error(prob, prob.pack(traj)))
    return GradcheckReport(trials, errors, time.perf_counter() - t0)
