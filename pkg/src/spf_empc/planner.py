"""Per-robot local replanning with safety fields, guidance points and symmetric candidates."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import costs, minco
from .costs import CostContext, CostProblem, CostWeights, GuidancePair
from .lbfgs import minimize
from .minco import Trajectory
from .spf import SpfParams, build_field
from .world import ObstacleState, RobotState


@dataclass(frozen=True)
class SharedTrajectory:
    robot_id: int
    priority: int
    trajectory: Trajectory
    start_time: float

    def position(self, t: float) -> np.ndarray:
        return self.trajectory.eval(t - self.start_time, 0)


@dataclass(frozen=True)
class WorldSnapshot:
    time: float
    obstacles: tuple = ()       # sensed dynamic obstacles (ObstacleState)
    statics: tuple = ()


@dataclass(frozen=True)
class PlanConfig:
    replan_period: float = 0.1
    horizon: float = 5.0
    goal_tolerance: float = 0.15
    sensing_radius: float = 4.0
    weights: CostWeights = CostWeights(dynamic=1000.0)
    spf: SpfParams = SpfParams(dt=2.0)
    segment_length: float = 1.0
    max_segments: int = 6
    samples_per_segment: int = 8
    memory: int = 8
    gtol: float = 1e-5
    max_iters: int = 60
    ftol: float = 1e-4                 # stop when relative decrease over `past` iterations < ftol
    past: int = 3
    outer_rounds: int = 3
    seed_speed_ratio: float = 0.7
    guidance_step: float = 0.05
    guidance_max_steps: int = 100
    replan_interval: float = 1.0       # forced re-optimization period when nothing else triggers
    deviation_tolerance: float = 0.3
    trigger_window: float = 3.0        # seconds of the published plan checked for hazards
    static_trigger_ratio: float = 0.8  # replan when the plan comes within this * static clearance
    stop_speed: float = 0.05
    oscillation_flips: int = 3
    oscillation_window: int = 10
    oscillation_factor: float = 1.2
    oscillation_hold: float = 2.0

    def __post_init__(self):
        if not self.replan_period > 0:
            raise ValueError("replan_period must be positive")
        if not self.horizon > self.goal_tolerance:
            raise ValueError("horizon must exceed goal_tolerance")
        if self.max_segments < 2 or self.samples_per_segment < 1:
            raise ValueError("need max_segments >= 2 and samples_per_segment >= 1")


@dataclass
class PlanResult:
    trajectory: Trajectory
    iterations: int
    feasible: bool = True
    candidate: str = "incumbent"
    cost: float = 0.0
    breakdown: dict = field(default_factory=dict)
    pairs: tuple = ()
    start_time: float = 0.0


def reached_goal(state: RobotState, goal, cfg: PlanConfig) -> bool:
    """Within the (closed) goal tolerance and nearly at rest."""
    dist = float(np.hypot(*(state.position - np.asarray(goal, dtype=float))))
    return dist <= cfg.goal_tolerance and state.speed <= cfg.stop_speed


def sensed_obstacles(position, obstacles, radius: float) -> list[tuple[int, ObstacleState]]:
    return [(i, o) for i, o in enumerate(obstacles)
            if float(np.hypot(*(o.position - position))) <= radius + o.radius]


def _boundary(state: RobotState, now: float, previous: SharedTrajectory | None, cfg: PlanConfig):
    if previous is not None:
        t = now - previous.start_time
        if 0.0 <= t <= previous.trajectory.total_time:
            head = np.stack([previous.trajectory.eval(t, o) for o in range(3)])
            if float(np.hypot(*(head[0] - state.position))) <= cfg.deviation_tolerance:
                return head
    head = np.zeros((3, 2))
    head[0] = state.position
    head[1] = state.velocity[:2]
    return head


def _push_out_of_statics(point, origin, statics, clearance: float):
    """Slide ``point`` back toward ``origin`` until it clears every static obstacle."""
    p = np.asarray(point, dtype=float)
    d = p - origin
    for frac in np.linspace(1.0, 0.0, 41):
        q = origin + frac * d
        if all(s.signed_distance(q[None])[0][0] > clearance for s in statics):
            return q
    return p


def _local_goal(head_p, goal, statics, cfg: PlanConfig):
    d = np.asarray(goal, dtype=float) - head_p
    dist = float(np.hypot(*d))
    if dist <= cfg.horizon:
        return np.asarray(goal, dtype=float), True
    local = head_p + d * (cfg.horizon / dist)
    return _push_out_of_statics(local, head_p, statics, cfg.weights.static_clearance), False


def _deflect(points, direction, statics, clearance: float, step: float = 0.05,
             max_steps: int = 60) -> np.ndarray:
    """Slide points that sit inside a static obstacle sideways (normal to ``direction``).

    A straight seed through the middle of an obstacle has no lateral static-cost
    gradient; moving it off the symmetry axis gives the optimizer a side to pass on.
    The side is away from the obstacle center (left on an exact tie).
    """
    out = np.array(points, dtype=float)
    normal = np.array([-direction[1], direction[0]])
    for s in statics:
        for i, p in enumerate(out):
            if s.signed_distance(p[None])[0][0] > clearance:
                continue
            rel = p - s.center
            sign = -1.0 if direction[0] * rel[1] - direction[1] * rel[0] < 0 else 1.0
            for _ in range(max_steps):
                p = p + sign * step * normal
                if s.signed_distance(p[None])[0][0] > clearance:
                    break
            out[i] = p
    return out


def seed_trajectory(head, local_goal, cfg: PlanConfig, previous: SharedTrajectory | None = None,
                    now: float = 0.0, statics=()) -> Trajectory:
    """Initial guess: the remaining previous plan (kept on its own timing) then a straight run.

    The time-stamped path is re-split into equal-duration segments so a plan
    that was already optimized is reproduced closely at the next replan.
    Seed points inside static obstacles are pushed sideways.
    """
    head = np.asarray(head, dtype=float)
    goal = np.asarray(local_goal, dtype=float)
    speed = cfg.seed_speed_ratio * cfg.weights.v_max
    times, pts = [0.0], [head[0]]
    if previous is not None:
        t0 = max(now - previous.start_time, 0.0)
        t_end = previous.trajectory.total_time
        if t_end - t0 > 1e-6:
            ts = np.linspace(t0, t_end, 24)[1:]
            times.extend(ts - t0)
            pts.extend(previous.trajectory.eval(ts, 0))
    pts, times = np.array(pts), np.array(times)
    if float(np.hypot(*(goal - head[0]))) + cfg.segment_length < \
            float(np.sum(np.hypot(*np.diff(pts, axis=0).T))) or len(pts) == 1:
        pts, times = pts[:1], times[:1]          # previous plan is a detour: restart straight
    gap = float(np.hypot(*(goal - pts[-1])))
    if gap > 1e-6 or len(pts) == 1:
        pts = np.vstack([pts, goal])
        times = np.append(times, times[-1] + max(gap / speed, 0.2))
    length = float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))
    n_seg = int(np.clip(math.ceil(length / cfg.segment_length), 2, cfg.max_segments))
    total = max(times[-1], 0.2 * n_seg)
    knots = total * np.arange(1, n_seg) / n_seg
    inner = np.column_stack([np.interp(knots, times, pts[:, i]) for i in range(pts.shape[1])])
    chord = goal - head[0]
    if statics and float(np.hypot(*chord)) > 1e-9:
        inner = _deflect(inner, chord / float(np.hypot(*chord)), statics,
                         cfg.weights.static_clearance)
    tail = np.zeros((3, 2))
    tail[0] = goal
    return minco.build(head, tail, inner, np.full(n_seg, total / n_seg), cfg.samples_per_segment)


def emergency_stop(head, cfg: PlanConfig) -> Trajectory:
    """Decelerate to rest along the current velocity."""
    head = np.asarray(head, dtype=float)
    v = head[1]
    speed = float(np.hypot(*v))
    T = max(0.5, 1.5 * speed / cfg.weights.a_max)
    tail = np.zeros((3, 2))
    tail[0] = head[0] + 0.5 * v * T
    return minco.build(head, tail, np.zeros((0, 2)), [T], cfg.samples_per_segment)


def _optimize(traj: Trajectory, fields, context: CostContext, cfg: PlanConfig, pairs: list):
    """Outer guidance rounds around inner L-BFGS solves; returns (traj, iterations, pairs, ok)."""
    iterations = 0
    for _ in range(cfg.outer_rounds):
        ctx = replace(context, pairs=tuple(pairs))
        problem = CostProblem(traj.head, traj.tail, traj.n_segments, ctx, cfg.weights,
                              cfg.samples_per_segment)
        report = minimize(problem, problem.pack(traj), cfg.memory, cfg.gtol, cfg.max_iters,
                          ftol=cfg.ftol, past=cfg.past)
        iterations += report.iterations
        try:
            traj = problem.unpack(report.x)
        except minco.TrajectoryError:
            return traj, iterations, pairs, False
        known = {(p.sample, p.obstacle) for p in pairs}
        new = costs.find_guidance(traj, fields, cfg.guidance_step, cfg.guidance_max_steps, known)
        if any(not p.reachable for p in new):
            return traj, iterations, pairs, False
        if not new:
            break
        pairs = pairs + new
    return traj, iterations, pairs, True


def _hard_violation(breakdown: dict) -> float:
    return breakdown.get("swarm", 0.0) + breakdown.get("static", 0.0)


def plan_step(self_state: RobotState, goal, world: WorldSnapshot, shared, cfg: PlanConfig,
              previous: SharedTrajectory | None = None, robot_priority: int | None = None,
              threshold_scale: dict | None = None) -> PlanResult:
    """One replan: seed, build fields, optimize incumbent and symmetric candidate, select."""
    now = world.time
    head = _boundary(self_state, now, previous, cfg)
    local_goal, _ = _local_goal(head[0], goal, world.statics, cfg)
    if previous is not None and float(np.hypot(*(head[0] - self_state.position))) > cfg.deviation_tolerance:
        previous = None
    reach = float(np.hypot(*(local_goal - head[0]))) + 1.0
    statics = tuple(st for st in world.statics
                    if st.signed_distance(head[0][None])[0][0] <= reach)
    seed = seed_trajectory(head, local_goal, cfg, previous, now, statics)

    scale = threshold_scale or {}
    fields, field_ids = [], []
    for idx, obs in sensed_obstacles(self_state.position, world.obstacles, cfg.sensing_radius):
        f = build_field(obs, cfg.spf)
        if idx in scale:
            f = f.with_threshold(f.threshold * scale[idx])
        fields.append(f)
        field_ids.append(idx)
    others = tuple(s for s in shared
                   if (robot_priority is None or s.priority < robot_priority)
                   and float(np.hypot(*(s.position(now) - self_state.position))) <= cfg.sensing_radius)
    context = CostContext(start_time=now, others=others, statics=statics)

    seed_pairs = costs.find_guidance(seed, fields, cfg.guidance_step, cfg.guidance_max_steps)
    candidates = [("incumbent", seed, seed_pairs)]
    if seed_pairs and all(p.reachable for p in seed_pairs):
        candidates.append(("symmetric", costs.symmetry_candidate(seed, seed_pairs), None))

    total_iters = 0
    results = []
    for name, traj, pairs in candidates:
        if pairs is None:
            pairs = costs.find_guidance(traj, fields, cfg.guidance_step, cfg.guidance_max_steps)
        if any(not p.reachable for p in pairs):
            continue
        traj, iters, pairs, ok = _optimize(traj, fields, context, cfg, list(pairs))
        total_iters += iters
        if not ok:
            continue
        bd: dict = {}
        value, _, _ = costs.cost_in_coefficients(traj, replace(context, pairs=tuple(pairs)),
                                                 cfg.weights, bd)
        danger = bool(np.any(costs.danger_matrix(traj, fields)))
        results.append((danger, _hard_violation(bd) > 1e-6, value, name, traj, pairs, bd))

    if not results:
        return PlanResult(emergency_stop(head, cfg), total_iters, False, "emergency",
                          start_time=now)
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    danger, hard, value, name, traj, pairs, bd = results[0]
    mapped = tuple(replace(p, obstacle=field_ids[p.obstacle]) for p in pairs)
    return PlanResult(traj, total_iters, True, name, float(value), bd, mapped, now)


def trajectory_side(traj: Trajectory, center) -> int:
    """+1 if the obstacle center lies left of the trajectory at its closest approach, else -1."""
    ts = np.linspace(0.0, traj.total_time, 60)
    pos = traj.eval(ts, 0)
    vel = traj.eval(ts, 1)
    i = int(np.argmin(np.hypot(*(pos - center).T)))
    rel = np.asarray(center) - pos[i]
    cross = vel[i, 0] * rel[1] - vel[i, 1] * rel[0]
    return 1 if cross >= 0 else -1


@dataclass
class LocalPlanner:
    """Stateful wrapper adding replan triggers and oscillation damping around :func:`plan_step`."""

    robot_id: int
    priority: int
    goal: np.ndarray
    cfg: PlanConfig
    current: SharedTrajectory | None = None
    last_plan_time: float = -math.inf
    history: dict = field(default_factory=dict)       # obstacle -> deque of sides
    boosts: dict = field(default_factory=dict)        # obstacle -> expiry time
    iterations: int = 0
    replans: int = 0
    last_result: PlanResult | None = None

    def threshold_scale(self, now: float) -> dict:
        return {j: self.cfg.oscillation_factor for j, until in self.boosts.items() if now < until}

    def needs_replan(self, state: RobotState, world: WorldSnapshot, shared) -> str | None:
        """Reason to re-optimize now, or None to keep the published trajectory."""
        now = world.time
        if self.current is None:
            return "initial"
        if now - self.last_plan_time >= self.cfg.replan_interval - 1e-9:
            return "periodic"
        traj = self.current.trajectory
        t = now - self.current.start_time
        if float(np.hypot(*(traj.eval(t, 0) - state.position))) > self.cfg.deviation_tolerance:
            return "deviation"
        at_goal = float(np.hypot(*(traj.eval(traj.total_time, 0) - self.goal))) <= 1e-6
        if not at_goal and traj.total_time - t < 1.0:
            return "horizon"
        ts = np.linspace(max(t, 0.0), min(traj.total_time, t + self.cfg.trigger_window), 16)
        pos = traj.eval(ts, 0)
        scale = self.threshold_scale(now)
        for idx, obs in sensed_obstacles(state.position, world.obstacles, self.cfg.sensing_radius):
            f = build_field(obs, self.cfg.spf)
            thr = f.threshold * scale.get(idx, 1.0)
            if np.any(np.exp(-0.5 * np.einsum("mi,ij,mj->m", pos - f.center, f.cov_inv,
                                             pos - f.center)) * f.peak >= thr):
                return "danger"
        w = self.cfg.weights
        for s in world.statics:
            if np.any(s.signed_distance(pos)[0] < self.cfg.static_trigger_ratio * w.static_clearance):
                return "static"
        for other in shared:
            if other.priority >= self.priority:
                continue
            q, clamped = other.trajectory.eval(self.current.start_time + ts - other.start_time, 0,
                                               with_flag=True)
            if np.any((np.hypot(*(pos - q).T) < w.swarm_clearance) & ~clamped):
                return "swarm"
        return None

    def plan(self, state: RobotState, world: WorldSnapshot, shared, force: bool = False) -> PlanResult | None:
        """Replan if triggered (or forced); publishes and returns the new result."""
        reason = "forced" if force else self.needs_replan(state, world, shared)
        if reason is None:
            return None
        now = world.time
        res = plan_step(state, self.goal, world, shared, self.cfg, self.current, self.priority,
                        self.threshold_scale(now))
        self._track_oscillation(res, world)
        self.current = SharedTrajectory(self.robot_id, self.priority, res.trajectory, now)
        self.last_plan_time = now
        self.iterations += res.iterations
        self.replans += 1
        self.last_result = res
        return res

    def _track_oscillation(self, res: PlanResult, world: WorldSnapshot) -> None:
        now = world.time
        for j in sorted({p.obstacle for p in res.pairs}):
            side = trajectory_side(res.trajectory, world.obstacles[j].position)
            hist = self.history.setdefault(j, deque(maxlen=self.cfg.oscillation_window))
            hist.append(side)
            flips = sum(1 for a, b in zip(hist, list(hist)[1:]) if a != b)
            if flips > self.cfg.oscillation_flips:
                self.boosts[j] = now + self.cfg.oscillation_hold
                hist.clear()
