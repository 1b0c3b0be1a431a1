"""Fixed-step closed-loop simulation, collision detection and run metrics."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costs import CostWeights
from .empc import EmpcTracker, TrackerConfig
from .omni import RobotModel, rotation
from .planner import LocalPlanner, PlanConfig, WorldSnapshot, reached_goal
from .spf import SpfParams
from .world import (STREAM_OBSTACLE, STREAM_ROBOT_OBS, DynamicObstacleSpec,
                    ObstacleState, RobotState, Scenario, ScenarioError, derive_rng,
                    observe_robot, propagate_obstacle, wrap_angle)

ACTIVE, SUCCESS, COLLISION, OVERTIME = "active", "success", "collision", "overtime"


@dataclass(frozen=True)
class SimConfig:
    base_dt: float = 0.01
    control_dt: float = 0.1
    obstacle_dt: float = 0.1
    wheel_lag: float = 0.05          # first-order wheel-speed time constant (s); 0 = ideal
    state_margin: float = 0.5        # tracker state box = arena grown by this margin
    planner: PlanConfig = PlanConfig()
    tracker: TrackerConfig = TrackerConfig()
    model: RobotModel = RobotModel()

    def ratio(self, period: float) -> int:
        r = period / self.base_dt
        n = int(round(r))
        if n < 1 or abs(r - n) > 1e-9:
            raise ScenarioError(f"period {period} is not a multiple of the base step {self.base_dt}")
        return n


def _dataclass_from(cls, data: dict, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def sim_config(sc: Scenario) -> SimConfig:
    """Resolve the ``config`` block of a scenario (planner, weights, spf, tracker, sim)."""
    cfg = dict(sc.config or {})
    unknown = set(cfg) - {"planner", "weights", "spf", "tracker", "sim"}
    if unknown:
        raise ScenarioError(f"config: unknown section(s) {sorted(unknown)}")
    base = PlanConfig()
    weights = _dataclass_from(CostWeights, {**dataclasses.asdict(base.weights), **cfg.get("weights", {})},
                              "config.weights")
    spf = _dataclass_from(SpfParams, {**dataclasses.asdict(base.spf), **cfg.get("spf", {})}, "config.spf")
    planner = _dataclass_from(PlanConfig, cfg.get("planner", {}), "config.planner",
                              weights=weights, spf=spf)
    a, m = sc.arena, dict(cfg.get("sim", {})).get("state_margin", 0.5)
    tracker_kw = {"z_lb": (a.xmin - m, a.ymin - m, -math.inf), "z_ub": (a.xmax + m, a.ymax + m, math.inf)}
    tracker_kw.update(cfg.get("tracker", {}))
    tracker = _dataclass_from(TrackerConfig, tracker_kw, "config.tracker")
    out = _dataclass_from(SimConfig, cfg.get("sim", {}), "config.sim", planner=planner, tracker=tracker)
    for period in (out.control_dt, out.obstacle_dt, planner.replan_period):
        out.ratio(period)
    if abs(tracker.dt - out.control_dt) > 1e-12:
        raise ScenarioError("config.tracker.dt must equal config.sim.control_dt")
    return out


# ---------------------------------------------------------------- collisions

@dataclass(frozen=True)
class CollisionEvent:
    time: float
    robot: int
    kind: str        # robot | dynamic | static
    other: int


def _static_overlap(s, center, radius: float) -> bool:
    return float(s.signed_distance(np.asarray(center, dtype=float)[None])[0][0]) < radius


def detect_collisions(sim: "Simulation") -> list[CollisionEvent]:
    """Strict footprint overlaps among active robots, dynamic and static obstacles."""
    events = []
    active = [r for r in sim.robots if r.status == ACTIVE]
    for a_i, a in enumerate(active):
        pa = a.pose[:2]
        for b in active[a_i + 1:]:
            if float(np.hypot(*(pa - b.pose[:2]))) < a.spec.radius + b.spec.radius:
                events.append(CollisionEvent(sim.time, a.index, "robot", b.index))
                events.append(CollisionEvent(sim.time, b.index, "robot", a.index))
        for j, o in enumerate(sim.obstacles):
            if float(np.hypot(*(pa - o.position))) < a.spec.radius + o.radius:
                events.append(CollisionEvent(sim.time, a.index, "dynamic", j))
        for j, s in enumerate(sim.scenario.static_obstacles):
            if _static_overlap(s, pa, a.spec.radius):
                events.append(CollisionEvent(sim.time, a.index, "static", j))
    return events


# ---------------------------------------------------------------- state

@dataclass
class RobotSim:
    index: int
    spec: object
    pose: np.ndarray
    wheels: np.ndarray
    tracker: EmpcTracker
    planner: LocalPlanner
    rng: np.random.Generator
    status: str = ACTIVE
    path_length: float = 0.0
    travel_time: float = math.nan
    min_dynamic: float = math.inf
    observed: np.ndarray | None = None

    def twist(self, model: RobotModel) -> np.ndarray:
        return rotation(self.pose[2]) @ (model.wheel_matrix_inv @ self.wheels)


def _obstacle_velocity(spec: DynamicObstacleSpec, o: ObstacleState, target: int):
    """Nominal velocity for waypoint loops; returns (velocity, next target index)."""
    wps = np.asarray(spec.waypoints, dtype=float)
    d = wps[target] - o.position
    dist = float(np.hypot(*d))
    if dist < 1e-9:
        target = (target + 1) % len(wps)
        d = wps[target] - o.position
        dist = float(np.hypot(*d))
    return spec.speed * d / max(dist, 1e-9), target


@dataclass
class Simulation:
    scenario: Scenario
    cfg: SimConfig
    robots: list
    obstacles: list
    obstacle_rngs: list
    obstacle_targets: list
    steps: int = 0
    events: list = field(default_factory=list)
    robot_trace: list = field(default_factory=list)
    obstacle_trace: list = field(default_factory=list)
    plan_log: list = field(default_factory=list)
    command_log: list = field(default_factory=list)
    trajectory_log: list = field(default_factory=list)
    record: bool = True

    @property
    def time(self) -> float:
        return self.steps * self.cfg.base_dt

    @classmethod
    def create(cls, sc: Scenario, cfg: SimConfig | None = None, record: bool = True) -> "Simulation":
        cfg = sim_config(sc) if cfg is None else cfg
        robots = []
        for i, spec in enumerate(sc.robots):
            tracker = EmpcTracker.create(spec.start, cfg.model, cfg.tracker, cfg.base_dt)
            planner = LocalPlanner(i, spec.priority, spec.goal.copy(), cfg.planner)
            robots.append(RobotSim(i, spec, spec.start.copy(), np.zeros(3), tracker, planner,
                                   derive_rng(sc.seed, STREAM_ROBOT_OBS, i)))
        obstacles = [d.initial for d in sc.dynamic_obstacles]
        rngs = [derive_rng(sc.seed, STREAM_OBSTACLE, j) for j in range(len(obstacles))]
        sim = cls(sc, cfg, robots, obstacles, rngs, [0] * len(obstacles), record=record)
        sim._update_distances()
        return sim

    # ------------------------------------------------------------ stepping

    def _propagate_obstacles(self) -> None:
        dt = self.cfg.obstacle_dt
        a = self.scenario.arena
        for j, spec in enumerate(self.scenario.dynamic_obstacles):
            o = self.obstacles[j]
            if spec.motion == "waypoint_loop":
                v, self.obstacle_targets[j] = _obstacle_velocity(spec, o, self.obstacle_targets[j])
                o = ObstacleState(o.position, v, o.radius)
            o = propagate_obstacle(o, dt, self.scenario.noise, self.obstacle_rngs[j], spec.max_speed)
            if spec.motion == "waypoint_loop":
                wps = np.asarray(spec.waypoints, dtype=float)
                if float(np.hypot(*(wps[self.obstacle_targets[j]] - o.position))) <= spec.speed * dt:
                    self.obstacle_targets[j] = (self.obstacle_targets[j] + 1) % len(wps)
            else:
                p, v = o.position.copy(), o.velocity.copy()
                for axis, (lo, hi) in enumerate(((a.xmin, a.xmax), (a.ymin, a.ymax))):
                    lo, hi = lo + o.radius, hi - o.radius
                    if p[axis] < lo:
                        p[axis], v[axis] = 2 * lo - p[axis], abs(v[axis])
                    elif p[axis] > hi:
                        p[axis], v[axis] = 2 * hi - p[axis], -abs(v[axis])
                o = ObstacleState(p, v, o.radius)
            self.obstacles[j] = o

    def _observe(self) -> None:
        for r in self.robots:
            if r.status != ACTIVE:
                continue
            truth = RobotState(r.pose, r.twist(self.cfg.model), self.time)
            r.observed = observe_robot(truth, self.scenario.noise, r.rng).pose
            r.tracker.observe(r.observed, self.cfg.base_dt)

    def shared(self) -> list:
        return [r.planner.current for r in self.robots
                if r.status == ACTIVE and r.planner.current is not None]

    def _plan(self) -> None:
        t = self.time
        world = WorldSnapshot(t, tuple(self.obstacles), tuple(self.scenario.static_obstacles))
        # priority order: a robot sees plans its superiors published earlier in this tick
        for r in sorted(self.robots, key=lambda r: r.spec.priority):
            if r.status != ACTIVE:
                continue
            shared = self.shared()
            est = r.tracker.eso.z_hat
            state = RobotState(est, rotation(est[2]) @ (self.cfg.model.wheel_matrix_inv
                                                        @ r.tracker.command), t)
            res = r.planner.plan(state, world, shared)
            if res is not None and self.record:
                row = {"time": round(t, 6), "robot": r.index, "candidate": res.candidate,
                       "feasible": int(res.feasible), "iterations": res.iterations,
                       "cost": res.cost}
                row.update({f"cost_{k}": v for k, v in res.breakdown.items()})
                self.plan_log.append(row)
                self.trajectory_log.extend(
                    (round(t, 6), r.index, *p)
                    for p in res.trajectory.trace_rows(self.cfg.control_dt, res.start_time))

    def _control(self) -> None:
        t = self.time
        for r in self.robots:
            if r.status != ACTIVE or r.planner.current is None:
                continue
            cur = r.planner.current
            u = r.tracker.control(cur.trajectory, cur.start_time, t)
            if self.record:
                res = r.tracker.last
                self.command_log.append((round(t, 6), r.index, *u, res.iterations, int(not res.converged)))

    def _integrate(self) -> None:
        dt, model = self.cfg.base_dt, self.cfg.model
        lag = self.cfg.wheel_lag
        alpha = 1.0 if lag <= 0 else 1.0 - math.exp(-dt / lag)
        for r in self.robots:
            if r.status != ACTIVE:
                continue
            r.wheels = np.clip(r.wheels + alpha * (r.tracker.command - r.wheels), model.u_lb, model.u_ub)
            twist = r.twist(model)
            new = r.pose + dt * twist
            new[2] = wrap_angle(new[2])
            r.path_length += float(np.hypot(*(new[:2] - r.pose[:2])))
            r.pose = new

    def _update_distances(self) -> None:
        for r in self.robots:
            if r.status != ACTIVE:
                continue
            for o in self.obstacles:
                r.min_dynamic = min(r.min_dynamic, float(np.hypot(*(r.pose[:2] - o.position))))

    def _record(self) -> None:
        t = round(self.time, 6)
        for r in self.robots:
            if r.status == ACTIVE:
                self.robot_trace.append((t, r.index, *r.pose, *r.wheels))
        for j, o in enumerate(self.obstacles):
            self.obstacle_trace.append((t, j, *o.position, *o.velocity))

    def step(self) -> "Simulation":
        """Advance by one base step; sub-rate tasks fire when the step count is a multiple."""
        cfg = self.cfg
        n = self.steps
        if n > 0 and n % cfg.ratio(cfg.obstacle_dt) == 0:
            self._propagate_obstacles()
        self._observe()
        if n % cfg.ratio(cfg.planner.replan_period) == 0:
            self._plan()
        if n % cfg.ratio(cfg.control_dt) == 0:
            self._control()
            if self.record:
                self._record()
        self._integrate()
        self.steps += 1
        self._update_distances()
        events = detect_collisions(self)
        hit = {e.robot for e in events}
        self.events.extend(events)
        for r in self.robots:
            if r.status != ACTIVE:
                continue
            if r.index in hit:
                r.status = COLLISION
            else:
                state = RobotState(r.pose, r.twist(cfg.model), self.time)
                if reached_goal(state, r.spec.goal, cfg.planner):
                    r.status = SUCCESS
                    r.travel_time = self.time
        return self

    @property
    def done(self) -> bool:
        return all(r.status != ACTIVE for r in self.robots)


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class RobotMetrics:
    robot: int
    success: bool
    overtime: bool
    collision: bool
    path_length: float
    travel_time: float
    iterations: int
    replans: int
    min_dynamic_distance: float

    @property
    def iterations_per_replan(self) -> float:
        return self.iterations / self.replans if self.replans else 0.0


@dataclass(frozen=True)
class RunMetrics:
    seed: int
    noise_scale: float
    robots: tuple
    sim_time: float

    @property
    def success(self) -> bool:
        return bool(self.robots) and all(r.success for r in self.robots)

    @property
    def collision(self) -> bool:
        return any(r.collision for r in self.robots)

    @property
    def overtime(self) -> bool:
        return not self.collision and any(r.overtime for r in self.robots)

    @property
    def min_dynamic_distance(self) -> float:
        return min((r.min_dynamic_distance for r in self.robots), default=math.inf)

    @property
    def mean_iterations(self) -> float:
        """Mean over robots of L-BFGS iterations per replanning call."""
        return float(np.mean([r.iterations_per_replan for r in self.robots])) if self.robots else 0.0

    @property
    def path_length(self) -> float:
        return float(np.mean([r.path_length for r in self.robots])) if self.robots else math.nan

    @property
    def travel_time(self) -> float:
        ok = [r.travel_time for r in self.robots if r.success]
        return float(np.mean(ok)) if ok else math.nan

    def row(self) -> dict:
        return {"seed": self.seed, "noise_scale": self.noise_scale, "success": int(self.success),
                "overtime": int(self.overtime), "collision": int(self.collision),
                "dynamic_distance": self.min_dynamic_distance, "path_length": self.path_length,
                "travel_time": self.travel_time, "iterations": self.mean_iterations,
                "sim_time": self.sim_time}


def run_simulation(sc: Scenario, cfg: SimConfig | None = None, record: bool = True) -> Simulation:
    sim = Simulation.create(sc, cfg, record)
    limit = int(round(sc.timeout / sim.cfg.base_dt))
    while not sim.done and sim.steps < limit:
        sim.step()
    for r in sim.robots:
        if r.status == ACTIVE:
            r.status = OVERTIME
    return sim


def metrics_of(sim: Simulation) -> RunMetrics:
    robots = tuple(RobotMetrics(r.index, r.status == SUCCESS, r.status == OVERTIME,
                                r.status == COLLISION, r.path_length, r.travel_time,
                                r.planner.iterations, r.planner.replans, r.min_dynamic)
                   for r in sim.robots)
    return RunMetrics(sim.scenario.seed, sim.scenario.noise.scale, robots, round(sim.time, 6))


def run_to_completion(sc: Scenario, cfg: SimConfig | None = None) -> RunMetrics:
    """Simulate until every robot is terminal or the timeout elapses."""
    return metrics_of(run_simulation(sc, cfg, record=False))


SUMMARY_COLUMNS = ("noise_scale", "runs", "SR", "OR",
                  "dynamic_distance_mean", "dynamic_distance_min", "dynamic_distance_std",
                  "path_length_mean", "path_length_min", "path_length_std",
                  "travel_time_mean", "travel_time_min", "travel_time_std", "iterations")


def _stats(values) -> tuple[float, float, float]:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    return float(v.mean()), float(v.min()), float(v.std())


def summarize(runs) -> dict:
    """Summary row over a set of runs: rates in percent, mean|min|std distributions."""
    runs = list(runs)
    n = len(runs)
    row = {"noise_scale": runs[0].noise_scale if runs else math.nan, "runs": n,
           "SR": 100.0 * sum(r.success for r in runs) / n if n else math.nan,
           "OR": 100.0 * sum(r.overtime for r in runs) / n if n else math.nan}
    robots = [m for r in runs for m in r.robots]
    groups = {"dynamic_distance": [r.min_dynamic_distance for r in runs],
              "path_length": [m.path_length for m in robots if m.success],
              "travel_time": [m.travel_time for m in robots if m.success]}
    for name, vals in groups.items():
        row[f"{name}_mean"], row[f"{name}_min"], row[f"{name}_std"] = _stats(vals)
    row["iterations"] = (float(np.mean([m.iterations_per_replan for m in robots]))
                         if robots else math.nan)
    return row


# ---------------------------------------------------------------- output

SCHEMA_LINE = "# spf-empc-output/1"


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 9)) if math.isfinite(v) else str(v)
    return v


def write_table(path, header, rows) -> None:
    """Write a schema-tagged comma-separated table."""
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(h, "") for h in header]
            w.writerow([_fmt(v) for v in row])


def run_tag(seed: int, scale: float) -> str:
    return f"seed{seed}_noise{scale:g}"


def write_run_outputs(sim: Simulation, out_dir) -> dict:
    """Metrics plus robot/obstacle/plan/command traces; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = run_tag(sim.scenario.seed, sim.scenario.noise.scale)
    m = metrics_of(sim)
    paths = {k: out / f"{k}_{tag}.csv" for k in ("metrics", "robots", "obstacles", "plans", "commands")}
    robot_header = list(RobotMetrics.__dataclass_fields__)
    write_table(paths["metrics"], robot_header + ["iterations_per_replan"],
                [{**dataclasses.asdict(r), "iterations_per_replan": r.iterations_per_replan}
                 for r in m.robots])
    write_table(paths["robots"], ["time", "robot", "x", "y", "theta", "w1", "w2", "w3"], sim.robot_trace)
    write_table(paths["obstacles"], ["time", "obstacle", "x", "y", "vx", "vy"], sim.obstacle_trace)
    plan_header = ["time", "robot", "candidate", "feasible", "iterations", "cost"] + \
        [f"cost_{k}" for k in ("smooth", "feasible", "time", "swarm", "static", "dynamic")]
    write_table(paths["plans"], plan_header, sim.plan_log)
    write_table(paths["commands"], ["time", "robot", "u1", "u2", "u3", "iterations", "flagged"],
                sim.command_log)
    return paths


def write_trajectory_trace(sim: Simulation, out_dir) -> Path:
    """Every published plan sampled at the control rate: (plan time, robot, t, x, y, vx, vy)."""
    path = Path(out_dir) / f"trajectories_{run_tag(sim.scenario.seed, sim.scenario.noise.scale)}.csv"
    write_table(path, ["plan_time", "robot", "t", "x", "y", "vx", "vy"], sim.trajectory_log)
    return path
