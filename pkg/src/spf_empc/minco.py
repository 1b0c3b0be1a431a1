"""Piecewise quintic minimum-jerk trajectories parameterized by waypoints and durations.

The coefficient matrix ``C`` (6N x n, segment-local power basis) solves a
banded system ``L C = b`` assembled from boundary conditions, waypoint
interpolation and C^4 continuity at the junctions. Gradients of any cost
``H(C, T)`` are pulled back to the waypoints and durations with one
transposed banded solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import lapack

KL, KU = 4, 2  # lower/upper bandwidth of the linking matrix

_FACT = np.array([1.0, 1.0, 2.0, 6.0, 24.0, 120.0])


class TrajectoryError(ValueError):
    """Raised when a trajectory cannot be constructed."""


_ORDERS = np.arange(6)
# d^o/dt^o t^j = _DCOEF[o, j] * t^_DSHIFT[o, j]
_DCOEF = np.array([[_FACT[j] / _FACT[j - o] if j >= o else 0.0 for j in range(6)] for o in range(6)])
_DSHIFT = np.array([[max(j - o, 0) for j in range(6)] for o in range(6)])


def basis(t, order: int = 0) -> np.ndarray:
    """Derivative ``order`` of the quintic power basis [1, t, ..., t^5] at ``t``.

    Accepts a scalar (returns shape (6,)) or an array (returns shape (..., 6)).
    """
    pw = np.asarray(t, dtype=float)[..., None] ** _ORDERS
    return _DCOEF[order] * pw[..., _DSHIFT[order]]


def basis_stack(t, orders) -> np.ndarray:
    """Several basis derivatives at once, shape (..., len(orders), 6)."""
    pw = np.asarray(t, dtype=float)[..., None] ** _ORDERS
    orders = np.asarray(orders)
    return _DCOEF[orders] * pw[..., _DSHIFT[orders]]


@dataclass(frozen=True)
class Trajectory:
    head: np.ndarray          # (3, n) position, velocity, acceleration at t=0
    tail: np.ndarray          # (3, n) same at the final time
    waypoints: np.ndarray     # (N-1, n) intermediate waypoints
    durations: np.ndarray     # (N,)
    coeffs: np.ndarray        # (N, 6, n)
    samples_per_segment: int
    _lu: np.ndarray
    _piv: np.ndarray

    @property
    def dim(self) -> int:
        return self.head.shape[1]

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @property
    def total_time(self) -> float:
        return float(np.sum(self.durations))

    @property
    def knot_times(self) -> np.ndarray:
        """Cumulative times of segment boundaries, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def locate(self, t):
        """Segment index, segment-local time and clamp flag for time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        total = self.total_time
        clamped = (t < 0.0) | (t > total)
        tc = np.clip(t, 0.0, total)
        knots = self.knot_times
        seg = np.clip(np.searchsorted(knots, tc, side="right") - 1, 0, self.n_segments - 1)
        return seg, tc - knots[seg], clamped

    def eval(self, t, order: int = 0, with_flag: bool = False):
        """Derivative ``order`` (0..3) at time(s) ``t``; times outside the domain are clamped."""
        if not 0 <= order <= 5:
            raise ValueError("order must be in 0..5")
        seg, local, clamped = self.locate(t)
        b = basis(local, order)
        val = np.einsum("...c,...cd->...d", b, self.coeffs[seg])
        if with_flag:
            return val, clamped
        return val

    def sample_alphas(self) -> np.ndarray:
        k = self.samples_per_segment
        return np.arange(1, k + 1) / k

    def sample_times(self) -> np.ndarray:
        """(N, k) absolute sample times at fractions j/k of every segment."""
        starts = self.knot_times[:-1]
        return starts[:, None] + self.durations[:, None] * self.sample_alphas()[None, :]

    @cached_property
    def sample_basis(self) -> np.ndarray:
        """(N, k, 4, 6) basis derivatives of order 0..3 at the sample knots."""
        local = self.durations[:, None] * self.sample_alphas()[None, :]
        return basis_stack(local, range(4))

    @cached_property
    def sample_states(self) -> np.ndarray:
        """(N, k, 4, n) position, velocity, acceleration and jerk at the sample knots."""
        return np.einsum("skoc,scd->skod", self.sample_basis, self.coeffs)

    def adjoint(self, dH_dC: np.ndarray) -> np.ndarray:
        """Solve L^T adj = dH/dC using the stored banded LU factors."""
        rhs = np.asarray(dH_dC, dtype=float).reshape(6 * self.n_segments, self.dim)
        adj, info = lapack.dgbtrs(self._lu, KL, KU, rhs, self._piv, trans=1)
        if info != 0:
            raise TrajectoryError(f"adjoint solve failed (info={info})")
        return adj

    def trace_rows(self, dt: float, t0: float = 0.0) -> list[list[float]]:
        """Sampled (t, position..., velocity...) rows for export."""
        ts = np.arange(0.0, self.total_time + 0.5 * dt, dt)
        ts[-1] = min(ts[-1], self.total_time)
        pos = self.eval(ts, 0)
        vel = self.eval(ts, 1)
        return [[t0 + float(t), *map(float, p), *map(float, v)] for t, p, v in zip(ts, pos, vel)]


@lru_cache(maxsize=64)
def _band_layout(n_seg: int):
    """Band-storage positions of every nonzero of the linking matrix.

    Each entry is either a constant or the basis value B[seg, order, c] with
    B[i, o] = basis(T_i, o).
    """
    rows, cols, seg, order, col_c, const = [], [], [], [], [], []

    def put(r, c, s=0, o=0, k=0, value=np.nan):
        if r - c > KL or c - r > KU:
            raise AssertionError("entry outside linking-matrix band")
        rows.append(r), cols.append(c), seg.append(s), order.append(o), col_c.append(k)
        const.append(value)

    for d in range(3):
        put(d, d, value=_FACT[d])
    for i in range(n_seg - 1):
        row = 6 * i + 3
        for c in range(6):
            put(row, 6 * i + c, i, 0, c)
        for d in range(5):
            for c in range(d, 6):
                put(row + 1 + d, 6 * i + c, i, d, c)
            put(row + 1 + d, 6 * (i + 1) + d, value=-_FACT[d])
    for d in range(3):
        for c in range(d, 6):
            put(6 * n_seg - 3 + d, 6 * (n_seg - 1) + c, n_seg - 1, d, c)
    rows, cols = np.array(rows), np.array(cols)
    const = np.array(const)
    return (KL + KU + rows - cols, cols, np.array(seg), np.array(order), np.array(col_c),
            np.isnan(const), np.nan_to_num(const))


def _assemble(durations: np.ndarray) -> np.ndarray:
    n_seg = len(durations)
    brow, bcol, seg, order, col_c, variable, const = _band_layout(n_seg)
    B = basis_stack(durations, range(5))  # (N, 5, 6)
    ab = np.zeros((2 * KL + KU + 1, 6 * n_seg))
    ab[brow, bcol] = np.where(variable, B[seg, order, col_c], const)
    return ab


def _rhs(head: np.ndarray, tail: np.ndarray, waypoints: np.ndarray) -> np.ndarray:
    n_seg = len(waypoints) + 1
    b = np.zeros((6 * n_seg, head.shape[1]))
    b[0:3] = head
    for i, q in enumerate(waypoints):
        b[6 * i + 3] = q
    b[6 * n_seg - 3:] = tail
    return b


def build(head, tail, waypoints, durations, samples_per_segment: int = 4) -> Trajectory:
    """Minimum-jerk spline through ``waypoints`` with segment ``durations``.

    ``head``/``tail`` are (3, n) arrays of position, velocity, acceleration
    (a (n,) position is accepted and padded with zero derivatives).
    """
    head = np.atleast_2d(np.asarray(head, dtype=float))
    tail = np.atleast_2d(np.asarray(tail, dtype=float))
    n = head.shape[1]
    head = np.vstack([head, np.zeros((3 - head.shape[0], n))])
    tail = np.vstack([tail, np.zeros((3 - tail.shape[0], n))])
    durations = np.asarray(durations, dtype=float).reshape(-1)
    n_seg = len(durations)
    waypoints = np.asarray(waypoints, dtype=float).reshape(max(n_seg - 1, 0), n)
    if n_seg < 1:
        raise TrajectoryError("need at least one segment")
    if tail.shape != head.shape or head.shape[0] != 3:
        raise TrajectoryError("head/tail must be (3, n) with matching n")
    if not np.all(np.isfinite(durations)) or np.any(durations <= 0):
        raise TrajectoryError("segment durations must be finite and positive")
    if not (np.all(np.isfinite(head)) and np.all(np.isfinite(tail)) and np.all(np.isfinite(waypoints))):
        raise TrajectoryError("boundary conditions and waypoints must be finite")
    if samples_per_segment < 1:
        raise TrajectoryError("samples_per_segment must be >= 1")
    ab = _assemble(durations)
    lu, piv, info = lapack.dgbtrf(ab, KL, KU)
    if info != 0:
        raise TrajectoryError(f"singular linking matrix (info={info})")
    sol, info = lapack.dgbtrs(lu, KL, KU, _rhs(head, tail, waypoints), piv)
    if info != 0:
        raise TrajectoryError(f"coefficient solve failed (info={info})")
    return Trajectory(head, tail, waypoints, durations, sol.reshape(n_seg, 6, n),
                      int(samples_per_segment), lu, piv)


def propagate_gradient(traj: Trajectory, dH_dC, dH_dT_partial) -> tuple[np.ndarray, np.ndarray]:
    """Pull gradients of H(C, T) back to (waypoints, durations) via one adjoint solve."""
    n_seg, n = traj.n_segments, traj.dim
    adj = traj.adjoint(dH_dC).reshape(n_seg, 6, n)
    dG_dP = adj[:-1, 3, :].copy()
    dG_dT = np.array(dH_dT_partial, dtype=float).reshape(n_seg).copy()
    T = traj.durations
    # rows of (dL/dT_i) C for the interior junction blocks: p', p', p'', p''', p'''', p'''''
    if n_seg > 1:
        d = np.stack([np.einsum("sc,scd->sd", basis(T[:-1], o), traj.coeffs[:-1])
                      for o in range(1, 6)], axis=1)   # (N-1, 5, n), orders 1..5
        rows = np.concatenate([d[:, :1], d], axis=1)     # (N-1, 6, n)
        junction = np.concatenate([adj[:-1, 3:], adj[1:, :3]], axis=1)  # rows 6i+3 .. 6i+8
        dG_dT[:-1] -= np.einsum("sjd,sjd->s", rows, junction)
    last = traj.coeffs[-1]
    tail_rows = np.stack([basis(T[-1], o) @ last for o in (1, 2, 3)])
    dG_dT[-1] -= np.sum(tail_rows * adj[-1, 3:])
    return dG_dP, dG_dT


def time_forward(tau) -> np.ndarray:
    return np.exp(np.asarray(tau, dtype=float))


def time_backward(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("durations must be positive")
    return np.log(T)


def time_chain(dG_dT, T) -> np.ndarray:
    return np.asarray(dG_dT, dtype=float) * np.asarray(T, dtype=float)


def jerk_energy(traj: Trajectory) -> float:
    """Closed-form integral of the squared jerk norm over the whole trajectory."""
    c3, c4, c5 = traj.coeffs[:, 3], traj.coeffs[:, 4], traj.coeffs[:, 5]
    T = traj.durations[:, None]
    e = (36 * c3**2 * T + 144 * c3 * c4 * T**2 + (192 * c4**2 + 240 * c3 * c5) * T**3
         + 720 * c4 * c5 * T**4 + 720 * c5**2 * T**5)
    return float(np.sum(e))


def straight_line(start, goal, n_segments: int, speed: float, samples_per_segment: int = 4,
                  head=None) -> Trajectory:
    """Rest-to-rest seed along the segment start->goal with uniform durations."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    frac = np.arange(1, n_segments)[:, None] / n_segments
    pts = start + frac * (goal - start)
    dist = float(np.hypot(*(goal - start)))
    T = max(dist / max(speed, 1e-6), 0.3 * n_segments) / n_segments
    h = start if head is None else head
    return build(h, goal, pts, np.full(n_segments, T), samples_per_segment)

