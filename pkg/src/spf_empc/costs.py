"""Planning cost terms, guidance points and the symmetric alternative trajectory.

Every term returns ``(value, dH_dC, dH_dT)`` where ``dH_dC`` has the shape of
the coefficient tensor (N, 6, n) and ``dH_dT`` holds the explicit
dependence on the segment durations with the coefficients held fixed.
Penalties are evaluated at the sample knots (fractions j/k, j=1..k, of
every segment).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import minco
from .minco import Trajectory
from .spf import SafetyField, field_value, safe_direction


@dataclass(frozen=True)
class CostWeights:
    smooth: float = 1.0
    feasible: float = 1e3
    time: float = 2.0
    swarm: float = 1e4
    static: float = 1e4
    dynamic: float = 10.0
    d_saf: float = 0.35            # robot radius + margin
    swarm_clearance: float = 0.6   # center-to-center
    static_clearance: float = 0.35
    v_max: float = 0.8
    a_max: float = 1.0
    t_max: float = 3.0             # longest segment duration before the feasibility penalty
    waypoint_weights: tuple | None = None   # per sample knot; None means all ones

    def __post_init__(self):
        for name in ("smooth", "feasible", "time", "swarm", "static", "dynamic"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"weight {name} must be non-negative")
        for name in ("d_saf", "swarm_clearance", "static_clearance", "v_max", "a_max", "t_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class GuidancePair:
    sample: int              # flat sample-knot index (segment * k + j - 1)
    obstacle: int
    point: np.ndarray        # guidance point where the field drops below threshold
    direction: np.ndarray    # unit safe direction at the dangerous sample
    steps: int = 0
    reachable: bool = True


class StaticPack:
    """Static obstacles stacked into arrays for one vectorized clearance evaluation."""

    def __init__(self, statics):
        boxes = [s for s in statics if hasattr(s, "half_extents")]
        circles = [s for s in statics if not hasattr(s, "half_extents")]
        self.box_c = np.array([b.center for b in boxes]).reshape(-1, 2)
        self.box_h = np.array([b.half_extents for b in boxes]).reshape(-1, 2)
        self.circ_c = np.array([c.center for c in circles]).reshape(-1, 2)
        self.circ_r = np.array([c.radius for c in circles], dtype=float)

    def penalty(self, points: np.ndarray, clearance: float):
        """sum max(0, clearance - sd)^3 over points and obstacles, with d/dpoints."""
        value = 0.0
        gp = np.zeros_like(points)
        if len(self.box_c):
            d = points[:, None, :] - self.box_c[None]
            sgn = np.where(d >= 0, 1.0, -1.0)
            q = np.abs(d) - self.box_h
            outside = np.maximum(q, 0.0)
            out_norm = np.sqrt(np.sum(outside * outside, axis=-1))
            is_out = out_norm > 0
            dist = np.where(is_out, out_norm, np.max(q, axis=-1))
            viol = np.maximum(clearance - dist, 0.0)
            if np.any(viol > 0):
                grad_out = outside / np.where(is_out, out_norm, 1.0)[..., None] * sgn
                axis = np.argmax(q, axis=-1)
                grad_in = np.where(np.arange(2) == axis[..., None], sgn, 0.0)
                grad = np.where(is_out[..., None], grad_out, grad_in)
                value += float(np.sum(viol**3))
                gp -= np.einsum("mb,mbd->md", 3.0 * viol**2, grad)
        if len(self.circ_c):
            d = points[:, None, :] - self.circ_c[None]
            norm = np.sqrt(np.sum(d * d, axis=-1))
            viol = np.maximum(clearance - (norm - self.circ_r), 0.0)
            if np.any(viol > 0):
                grad = np.where((norm > 0)[..., None], d / np.where(norm > 0, norm, 1.0)[..., None],
                                np.array([1.0, 0.0]))
                value += float(np.sum(viol**3))
                gp -= np.einsum("mb,mbd->md", 3.0 * viol**2, grad)
        return value, gp


@dataclass(frozen=True)
class CostContext:
    start_time: float = 0.0
    others: tuple = ()       # objects with .trajectory and .start_time (higher priority robots)
    statics: tuple = ()
    pairs: tuple = ()
    static_pack: StaticPack | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.statics:
            object.__setattr__(self, "static_pack", StaticPack(self.statics))


TERMS = ("smooth", "feasible", "time", "swarm", "static", "dynamic")


def _zero(traj: Trajectory):
    return np.zeros_like(traj.coeffs), np.zeros(traj.n_segments)


def _pull_samples(traj: Trajectory, gp, gv=None, ga=None):
    """Map gradients wrt sample position/velocity/acceleration to (dH_dC, dH_dT)."""
    B = traj.sample_basis          # (N, k, 4, 6)
    S = traj.sample_states         # (N, k, 4, n)
    alpha = traj.sample_alphas()
    dC = np.einsum("skc,skd->scd", B[:, :, 0], gp)
    dt = np.einsum("skd,skd->sk", gp, S[:, :, 1])
    if gv is not None:
        dC += np.einsum("skc,skd->scd", B[:, :, 1], gv)
        dt += np.einsum("skd,skd->sk", gv, S[:, :, 2])
    if ga is not None:
        dC += np.einsum("skc,skd->scd", B[:, :, 2], ga)
        dt += np.einsum("skd,skd->sk", ga, S[:, :, 3])
    return dC, dt @ alpha


def cost_smooth(traj: Trajectory, context: CostContext | None = None):
    """Closed-form integral of the squared jerk."""
    c3, c4, c5 = traj.coeffs[:, 3], traj.coeffs[:, 4], traj.coeffs[:, 5]
    T = traj.durations[:, None]
    T2, T3, T4, T5 = T**2, T**3, T**4, T**5
    value = np.sum(36 * c3**2 * T + 144 * c3 * c4 * T2 + (192 * c4**2 + 240 * c3 * c5) * T3
                   + 720 * c4 * c5 * T4 + 720 * c5**2 * T5)
    dC = np.zeros_like(traj.coeffs)
    dC[:, 3] = 72 * c3 * T + 144 * c4 * T2 + 240 * c5 * T3
    dC[:, 4] = 144 * c3 * T2 + 384 * c4 * T3 + 720 * c5 * T4
    dC[:, 5] = 240 * c3 * T3 + 720 * c4 * T4 + 1440 * c5 * T5
    dT = np.sum(36 * c3**2 + 288 * c3 * c4 * T + 3 * (192 * c4**2 + 240 * c3 * c5) * T2
                + 2880 * c4 * c5 * T3 + 3600 * c5**2 * T4, axis=1)
    return float(value), dC, dT


def cost_time(traj: Trajectory, context: CostContext | None = None):
    return float(np.sum(traj.durations)), np.zeros_like(traj.coeffs), np.ones(traj.n_segments)


def _hinge_sq_norm(x, limit):
    """sum over samples of max(0, |x|^2 - limit^2)^3 and its gradient wrt x."""
    viol = np.maximum(np.sum(x * x, axis=-1) - limit * limit, 0.0)
    return float(np.sum(viol**3)), (6.0 * viol**2)[..., None] * x


# Sample-space kernels: (value, d/dpos, d/dvel, d/dacc, explicit d/dT) with None for zero parts.

def _feasible_kernel(traj: Trajectory, context, weights: CostWeights):
    S = traj.sample_states
    fv, gv = _hinge_sq_norm(S[:, :, 1], weights.v_max)
    fa, ga = _hinge_sq_norm(S[:, :, 2], weights.a_max)
    # over-long segments spread the samples so far apart in time that collisions slip between them
    over = np.maximum(traj.durations - weights.t_max, 0.0)
    return fv + fa + float(np.sum(over**3)), None, gv, ga, 3.0 * over**2


def _static_kernel(traj: Trajectory, context, weights: CostWeights):
    if not context.statics:
        return 0.0, None, None, None, None
    pos = traj.sample_states[:, :, 0]
    pack = context.static_pack or StaticPack(context.statics)
    value, gp = pack.penalty(pos.reshape(-1, traj.dim), weights.static_clearance)
    return value, gp.reshape(pos.shape), None, None, None


def _swarm_kernel(traj: Trajectory, context, weights: CostWeights):
    if not context.others:
        return 0.0, None, None, None, None
    pos = traj.sample_states[:, :, 0]
    t_abs = context.start_time + traj.sample_times()
    alpha = traj.sample_alphas()
    value = 0.0
    gp = np.zeros_like(pos)
    w_time = np.zeros(t_abs.shape)
    for other in context.others:
        t_loc = t_abs - other.start_time
        q, clamped = other.trajectory.eval(t_loc, 0, with_flag=True)
        d = pos - q
        dist = np.sqrt(np.sum(d * d, axis=-1))
        viol = np.where(clamped, 0.0, np.maximum(weights.swarm_clearance - dist, 0.0))
        active = viol > 0
        if not np.any(active):
            continue
        qd = np.where(clamped[..., None], 0.0, other.trajectory.eval(t_loc, 1))
        value += float(np.sum(viol**3))
        safe = np.where(dist > 0, dist, 1.0)
        g = np.where(active[..., None], (-3.0 * viol**2 / safe)[..., None] * d, 0.0)
        gp += g
        w_time += np.einsum("skd,skd->sk", -g, qd)   # dpen/dq . qdot
    # absolute sample time depends on T_i (fraction alpha) and on every earlier duration
    per_seg = w_time.sum(axis=1)
    later = np.concatenate([np.cumsum(per_seg[::-1])[::-1][1:], [0.0]])
    return value, gp, None, None, w_time @ alpha + later


def _dynamic_kernel(traj: Trajectory, context, weights: CostWeights):
    pairs = context.pairs
    if not pairs:
        return 0.0, None, None, None, None
    pos = traj.sample_states[:, :, 0]
    flat = pos.reshape(-1, traj.dim)
    lam = _sample_weights(traj, weights)
    idx = np.array([p.sample for p in pairs])
    g = np.array([p.point for p in pairs])
    u = np.array([p.direction for p in pairs])
    proj = np.einsum("md,md->m", flat[idx] - g, u)
    viol = np.maximum(weights.d_saf - proj, 0.0)
    value = float(np.sum(lam[idx] * viol**3))
    gp = np.zeros_like(flat)
    np.add.at(gp, idx, (-3.0 * lam[idx] * viol**2)[:, None] * u)
    return value, gp.reshape(pos.shape), None, None, None


def _pulled(traj: Trajectory, kernel_out):
    value, gp, gv, ga, dt_extra = kernel_out
    if gp is None and gv is None and ga is None:
        dC, dT = _zero(traj)
    else:
        gp = np.zeros_like(traj.sample_states[:, :, 0]) if gp is None else gp
        dC, dT = _pull_samples(traj, gp, gv, ga)
    if dt_extra is not None:
        dT = dT + dt_extra
    return value, dC, dT


def cost_feasible(traj: Trajectory, context: CostContext | None = None,
                  weights: CostWeights = CostWeights()):
    return _pulled(traj, KERNELS["feasible"](traj, context, weights))


def cost_static(traj: Trajectory, context: CostContext, weights: CostWeights = CostWeights()):
    return _pulled(traj, KERNELS["static"](traj, context, weights))


def cost_swarm(traj: Trajectory, context: CostContext, weights: CostWeights = CostWeights()):
    """Clearance penalty against other robots' trajectories at matched absolute times.

    Samples falling outside another robot's published time window are ignored:
    a local plan's end point is not where that robot will actually wait.
    """
    return _pulled(traj, KERNELS["swarm"](traj, context, weights))


def _sample_weights(traj: Trajectory, weights: CostWeights) -> np.ndarray:
    n = traj.n_segments * traj.samples_per_segment
    if weights.waypoint_weights is None:
        return np.ones(n)
    w = np.asarray(weights.waypoint_weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"waypoint_weights must have {n} entries")
    return w


def cost_dynamic(traj: Trajectory, pairs, weights: CostWeights = CostWeights()):
    """sum lambda_i * max(0, d_saf - (p_i - g_ij) . dir_ij)^3 over guidance pairs."""
    return _pulled(traj, KERNELS["dynamic"](traj, CostContext(pairs=tuple(pairs)), weights))


def danger_matrix(traj: Trajectory, fields) -> np.ndarray:
    """(S, F) boolean matrix: sample s lies at or above field f's threshold."""
    pos = traj.sample_states[:, :, 0].reshape(-1, traj.dim)
    if not fields:
        return np.zeros((len(pos), 0), dtype=bool)
    return np.stack([field_value(f, pos) >= f.threshold for f in fields], axis=1)


def march(f: SafetyField, start, step: float = 0.05, max_steps: int = 100, direction=None):
    """Walk from ``start`` along the safe direction (or a fixed ``direction``) until the
    field drops below threshold.

    Returns (point, steps, reached).
    """
    p = np.array(start, dtype=float)
    for n in range(max_steps + 1):
        if field_value(f, p) < f.threshold:
            return p, n, True
        if n == max_steps:
            break
        p = p + step * (safe_direction(f, p) if direction is None else direction)
    return p, max_steps, False


def _tie_break(direction, tangent):
    """Left normal of the path when the safe direction runs along it (head-on symmetric case):
    pushing a sample along its own path only moves it through the field, never around."""
    n = float(np.hypot(*tangent))
    if n < 1e-9:
        return None
    t = np.asarray(tangent) / n
    if abs(direction[0] * t[1] - direction[1] * t[0]) > 1e-6:
        return None
    return np.array([-t[1], t[0]])


def find_guidance(traj: Trajectory, fields, step: float = 0.05, max_steps: int = 100,
                  skip=frozenset()) -> list[GuidancePair]:
    """Guidance pairs for every dangerous (sample, field) combination not in ``skip``."""
    pos = traj.sample_states[:, :, 0].reshape(-1, traj.dim)
    vel = traj.sample_states[:, :, 1].reshape(-1, traj.dim)
    danger = danger_matrix(traj, fields)
    pairs = []
    for s, j in zip(*np.nonzero(danger)):
        if (int(s), int(j)) in skip:
            continue
        f = fields[j]
        u = safe_direction(f, pos[s])
        lateral = _tie_break(u, vel[s])
        point, n, ok = march(f, pos[s], step, max_steps, lateral)
        pairs.append(GuidancePair(int(s), int(j), point, u if lateral is None else lateral, n, ok))
    return pairs


def reflect_points(points, anchor, direction) -> np.ndarray:
    """Mirror points across the line through ``anchor`` with unit ``direction``."""
    u = np.asarray(direction, dtype=float)
    d = np.asarray(points, dtype=float) - anchor
    return anchor + 2.0 * np.outer(d @ u, u) - d


def _unit(v, fallback):
    n = float(np.hypot(*v))
    if n > 1e-9:
        return np.asarray(v) / n
    return fallback


def dangerous_runs(mask) -> list[tuple[int, int]]:
    """Inclusive (first, last) index ranges of consecutive True entries."""
    runs, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def symmetry_lines(traj: Trajectory, mask) -> list[tuple[tuple[int, int], np.ndarray, np.ndarray]]:
    """Mirror line (anchor, unit direction) for each run of dangerous sample knots."""
    pos = traj.sample_states[:, :, 0].reshape(-1, traj.dim)
    vel = traj.sample_states[:, :, 1].reshape(-1, traj.dim)
    start_p, start_v = traj.head[0], traj.head[1]
    out = []
    for first, last in dangerous_runs(mask):
        at_start, at_end = first == 0, last == len(pos) - 1
        entry = start_p if at_start else pos[first - 1]
        exit_ = pos[last] if at_end else pos[last + 1]
        chord = _unit(exit_ - entry, np.array([1.0, 0.0]))
        if at_start and at_end:
            anchor, u = start_p, _unit(start_v, chord)
        elif at_end:
            anchor, u = exit_, _unit(vel[last], chord)
        elif at_start and float(np.hypot(*start_v)) > 1e-9:
            # the trajectory start is itself the only safe bound
            anchor, u = start_p, _unit(start_v, chord)
        else:
            anchor, u = entry, chord
        out.append(((first, last), anchor, u))
    return out


def symmetry_candidate(traj: Trajectory, pairs) -> Trajectory:
    """Rebuild ``traj`` with waypoints inside each dangerous run mirrored to the other side."""
    n_samples = traj.n_segments * traj.samples_per_segment
    mask = np.zeros(n_samples, dtype=bool)
    for p in pairs:
        mask[p.sample] = True
    k = traj.samples_per_segment
    wp_sample = np.arange(traj.n_segments - 1) * k + k - 1
    P = traj.waypoints.copy()
    for (first, last), anchor, u in symmetry_lines(traj, mask):
        sel = (wp_sample >= first) & (wp_sample <= last)
        if np.any(sel):
            P[sel] = reflect_points(P[sel], anchor, u)
    return minco.build(traj.head, traj.tail, P, traj.durations, k)


def term_values(traj: Trajectory, context: CostContext, weights: CostWeights) -> dict:
    """Unweighted value of every cost term."""
    return {
        "smooth": cost_smooth(traj)[0],
        "feasible": cost_feasible(traj, context, weights)[0],
        "time": cost_time(traj)[0],
        "swarm": cost_swarm(traj, context, weights)[0],
        "static": cost_static(traj, context, weights)[0],
        "dynamic": cost_dynamic(traj, context.pairs, weights)[0],
    }


# sample-space kernels by term name; looked up at call time so a term can be swapped out
KERNELS = {"feasible": _feasible_kernel, "swarm": _swarm_kernel,
           "static": _static_kernel, "dynamic": _dynamic_kernel}


def cost_in_coefficients(traj: Trajectory, context: CostContext, weights: CostWeights,
                         breakdown: dict | None = None):
    """Weighted total H(C, T) with gradients in coefficient/duration space.

    Sample-based terms are summed in sample space and mapped to (C, T) once.
    """
    value = 0.0
    dC = np.zeros_like(traj.coeffs)
    dT = np.zeros(traj.n_segments)
    parts = {}
    if weights.smooth:
        v, c, t = cost_smooth(traj)
        value += weights.smooth * v
        dC += weights.smooth * c
        dT += weights.smooth * t
        parts["smooth"] = weights.smooth * v
    if weights.time:
        value += weights.time * traj.total_time
        dT += weights.time
        parts["time"] = weights.time * traj.total_time
    shape = traj.sample_states[:, :, 0].shape
    grads = [np.zeros(shape), np.zeros(shape), np.zeros(shape)]
    used = [False, False, False]
    for name, kernel in KERNELS.items():
        w = getattr(weights, name)
        if w == 0:
            continue
        v, *g, extra = kernel(traj, context, weights)
        value += w * v
        parts[name] = w * v
        for i, gi in enumerate(g):
            if gi is not None:
                grads[i] += w * gi
                used[i] = True
        if extra is not None:
            dT += w * extra
    if any(used):
        c, t = _pull_samples(traj, grads[0], grads[1] if used[1] else None,
                             grads[2] if used[2] else None)
        dC += c
        dT += t
    if breakdown is not None:
        for name in TERMS:
            breakdown[name] = float(parts.get(name, 0.0))
    return value, dC, dT


def total_cost(traj: Trajectory, context: CostContext, weights: CostWeights,
               breakdown: dict | None = None):
    """Total weighted cost with gradients wrt intermediate waypoints and log-durations."""
    value, dC, dT = cost_in_coefficients(traj, context, weights, breakdown)
    dP, dT_full = minco.propagate_gradient(traj, dC, dT)
    return value, dP, minco.time_chain(dT_full, traj.durations)


@dataclass
class CostProblem:
    """Objective over x = [waypoints.ravel(), log-durations] for a fixed boundary."""

    head: np.ndarray
    tail: np.ndarray
    n_segments: int
    context: CostContext
    weights: CostWeights
    samples_per_segment: int = 4
    last_breakdown: dict = field(default_factory=dict)

    def pack(self, traj: Trajectory) -> np.ndarray:
        return np.concatenate([traj.waypoints.ravel(), minco.time_backward(traj.durations)])

    def unpack(self, x) -> Trajectory:
        n = self.head.shape[1]
        m = (self.n_segments - 1) * n
        P = np.asarray(x[:m]).reshape(self.n_segments - 1, n)
        return minco.build(self.head, self.tail, P, minco.time_forward(x[m:]),
                           self.samples_per_segment)

    def __call__(self, x):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                traj = self.unpack(x)
            except (minco.TrajectoryError, FloatingPointError):
                return np.inf, np.full(len(x), np.nan)
            value, dP, dtau = total_cost(traj, self.context, self.weights)
        return value, np.concatenate([dP.ravel(), dtau])
