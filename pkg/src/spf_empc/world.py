"""World model: state containers, noise injection, scenarios and seeded randomness."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SCHEMA_VERSION = "spf-empc-scenario/1"

# sub-stream tags for derive_rng; appending kinds keeps existing streams stable
STREAM_OBSTACLE = 0
STREAM_ROBOT_OBS = 1
STREAM_LAYOUT = 2


class ScenarioError(ValueError):
    """Raised when a scenario file or structure is invalid."""


def wrap_angle(theta):
    """Normalize an angle (or array of angles) to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def derive_rng(seed: int, kind: int, index: int) -> np.random.Generator:
    """Independent generator for one entity, keyed by (seed, kind, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(kind), int(index)]))


def _vec(values, size: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class ObstacleState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position, 2, "position"))
        object.__setattr__(self, "velocity", _vec(self.velocity, 2, "velocity"))
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class BoxObstacle:
    """Axis-aligned box given by center and half extents."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, 2, "center"))
        object.__setattr__(self, "half_extents", _vec(self.half_extents, 2, "half_extents"))
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")

    def signed_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact signed distance and its gradient for an (m, 2) array of points."""
        d = points - self.center
        sgn = np.where(d >= 0, 1.0, -1.0)
        q = np.abs(d) - self.half_extents
        outside = np.maximum(q, 0.0)
        out_norm = np.hypot(outside[:, 0], outside[:, 1])
        is_out = out_norm > 0
        dist = np.where(is_out, out_norm, np.max(q, axis=1))
        grad = np.zeros_like(points)
        safe = np.where(is_out, out_norm, 1.0)
        grad[is_out] = (outside[is_out] / safe[is_out, None]) * sgn[is_out]
        inside = ~is_out
        if np.any(inside):
            axis = np.argmax(q[inside], axis=1)
            rows = np.nonzero(inside)[0]
            grad[rows, axis] = sgn[rows, axis]
        return dist, grad


@dataclass(frozen=True)
class CircleObstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, 2, "center"))
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")

    def signed_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = points - self.center
        norm = np.hypot(d[:, 0], d[:, 1])
        grad = np.zeros_like(points)
        nz = norm > 0
        grad[nz] = d[nz] / norm[nz, None]
        grad[~nz, 0] = 1.0
        return norm - self.radius, grad


StaticObstacle = BoxObstacle | CircleObstacle


@dataclass(frozen=True)
class RobotState:
    pose: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        pose = _vec(self.pose, 3, "pose").copy()
        pose[2] = wrap_angle(pose[2])
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "velocity", _vec(self.velocity, 3, "velocity"))

    @property
    def position(self) -> np.ndarray:
        return self.pose[:2]

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise magnitudes; every std is multiplied by ``scale``."""

    obstacle_position_std: float = 1e-4
    obstacle_velocity_std: float = 1e-2
    robot_xy_std: float = 0.01
    robot_theta_std: float = math.radians(0.1)
    scale: float = 1.0

    def __post_init__(self):
        for name in ("obstacle_position_std", "obstacle_velocity_std", "robot_xy_std",
                     "robot_theta_std", "scale"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def coarse_robot_noise(cls, scale: float = 1.0) -> "NoiseModel":
        """Coarse robot observation noise: 1 m in x/y, 0.1 deg in heading."""
        return cls(robot_xy_std=1.0, robot_theta_std=math.radians(0.1), scale=scale)


def propagate_obstacle(o: ObstacleState, dt: float, noise: NoiseModel, rng: np.random.Generator,
                       max_speed: float = math.inf) -> ObstacleState:
    """One noisy integration step: v' = v + v_e (clamped), p' = p + v' dt + p_e."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v_noise = rng.normal(0.0, 1.0, 2) * (noise.obstacle_velocity_std * noise.scale)
    p_noise = rng.normal(0.0, 1.0, 2) * (noise.obstacle_position_std * noise.scale)
    v = o.velocity + v_noise
    speed = float(np.hypot(*v))
    if speed > max_speed:
        v = v * (max_speed / speed)
    return ObstacleState(o.position + v * dt + p_noise, v, o.radius)


def observe_robot(true_state: RobotState, noise: NoiseModel, rng: np.random.Generator) -> RobotState:
    """Noisy observation of a robot pose; velocity and timestamp pass through."""
    eps = rng.normal(0.0, 1.0, 3)
    pose = true_state.pose.copy()
    pose[:2] += eps[:2] * (noise.robot_xy_std * noise.scale)
    pose[2] += eps[2] * (noise.robot_theta_std * noise.scale)
    return RobotState(pose, true_state.velocity, true_state.timestamp)


@dataclass(frozen=True)
class Arena:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("arena bounds must have positive extent")

    def contains(self, p, margin: float = 0.0) -> bool:
        return (self.xmin + margin <= p[0] <= self.xmax - margin
                and self.ymin + margin <= p[1] <= self.ymax - margin)


@dataclass(frozen=True)
class RobotSpec:
    start: np.ndarray          # [x, y, theta]
    goal: np.ndarray           # [x, y]
    priority: int
    radius: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "start", _vec(self.start, 3, "start"))
        object.__setattr__(self, "goal", _vec(self.goal, 2, "goal"))
        if not self.radius > 0:
            raise ValueError("robot radius must be positive")


@dataclass(frozen=True)
class DynamicObstacleSpec:
    """Initial obstacle state plus its nominal motion script.

    ``motion`` is ``"constant_velocity"`` (reflects at arena walls) or
    ``"waypoint_loop"`` (cycles through ``waypoints`` at ``speed``).
    """

    initial: ObstacleState
    max_speed: float
    motion: str = "constant_velocity"
    waypoints: tuple = ()
    speed: float = 0.0

    def __post_init__(self):
        if self.motion not in ("constant_velocity", "waypoint_loop"):
            raise ValueError(f"unknown motion script {self.motion!r}")
        if self.motion == "waypoint_loop" and len(self.waypoints) < 2:
            raise ValueError("waypoint_loop needs at least two waypoints")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")


@dataclass(frozen=True)
class Scenario:
    arena: Arena
    robots: tuple
    static_obstacles: tuple = ()
    dynamic_obstacles: tuple = ()
    noise: NoiseModel = NoiseModel()
    timeout: float = 60.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        prios = sorted(r.priority for r in self.robots)
        if prios != list(range(len(self.robots))):
            raise ScenarioError("robot priorities must be the distinct integers 0..n-1")
        for i, r in enumerate(self.robots):
            for label, p in (("start", r.start[:2]), ("goal", r.goal)):
                if not self.arena.contains(p):
                    raise ScenarioError(f"robots[{i}].{label} lies outside the arena")
                pts = np.asarray(p, dtype=float)[None, :]
                for j, s in enumerate(self.static_obstacles):
                    if s.signed_distance(pts)[0][0] <= r.radius:
                        raise ScenarioError(f"robots[{i}].{label} intersects static_obstacles[{j}]")
        if not self.timeout > 0:
            raise ScenarioError("timeout must be positive")


def _static_from_dict(d: dict, where: str) -> StaticObstacle:
    kind = d.get("type")
    if kind == "box":
        return BoxObstacle(d["center"], d["half_extents"])
    if kind == "circle":
        return CircleObstacle(d["center"], d["radius"])
    raise ScenarioError(f"{where}.type must be 'box' or 'circle', got {kind!r}")


def _static_to_dict(s: StaticObstacle) -> dict:
    if isinstance(s, BoxObstacle):
        return {"type": "box", "center": s.center.tolist(), "half_extents": s.half_extents.tolist()}
    return {"type": "circle", "center": s.center.tolist(), "radius": float(s.radius)}


def scenario_from_dict(data: dict) -> Scenario:
    """Build a Scenario from its JSON structure, reporting the offending field on failure."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario root must be an object")
    if data.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"schema: expected {SCHEMA_VERSION!r}, got {data.get('schema')!r}")
    where = "arena"
    try:
        a = data["arena"]
        arena = Arena(float(a["xmin"]), float(a["xmax"]), float(a["ymin"]), float(a["ymax"]))
        robots = []
        for i, r in enumerate(data["robots"]):
            where = f"robots[{i}]"
            robots.append(RobotSpec(r["start"], r["goal"], int(r.get("priority", i)),
                                    float(r.get("radius", 0.15))))
        statics = []
        for i, s in enumerate(data.get("static_obstacles", [])):
            where = f"static_obstacles[{i}]"
            statics.append(_static_from_dict(s, where))
        dynamics = []
        for i, o in enumerate(data.get("dynamic_obstacles", [])):
            where = f"dynamic_obstacles[{i}]"
            motion = o.get("motion", {"type": "constant_velocity"})
            dynamics.append(DynamicObstacleSpec(
                ObstacleState(o["position"], o["velocity"], float(o["radius"])),
                max_speed=float(o.get("max_speed", 1.0)),
                motion=motion.get("type", "constant_velocity"),
                waypoints=tuple(tuple(map(float, w)) for w in motion.get("waypoints", ())),
                speed=float(motion.get("speed", 0.0)),
            ))
        where = "noise"
        noise = NoiseModel(**{k: float(v) for k, v in data.get("noise", {}).items()})
        where = "timeout"
        return Scenario(arena, tuple(robots), tuple(statics), tuple(dynamics), noise,
                        float(data.get("timeout", 60.0)), int(data.get("seed", 0)),
                        copy.deepcopy(data.get("config", {})))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def scenario_to_dict(sc: Scenario) -> dict:
    dyn = []
    for d in sc.dynamic_obstacles:
        motion: dict[str, Any] = {"type": d.motion}
        if d.motion == "waypoint_loop":
            motion.update(waypoints=[list(w) for w in d.waypoints], speed=d.speed)
        dyn.append({"position": d.initial.position.tolist(), "velocity": d.initial.velocity.tolist(),
                    "radius": d.initial.radius, "max_speed": d.max_speed, "motion": motion})
    return {
        "schema": SCHEMA_VERSION,
        "arena": {"xmin": sc.arena.xmin, "xmax": sc.arena.xmax,
                  "ymin": sc.arena.ymin, "ymax": sc.arena.ymax},
        "robots": [{"start": r.start.tolist(), "goal": r.goal.tolist(), "priority": r.priority,
                    "radius": r.radius} for r in sc.robots],
        "static_obstacles": [_static_to_dict(s) for s in sc.static_obstacles],
        "dynamic_obstacles": dyn,
        "noise": {k: getattr(sc.noise, k) for k in ("obstacle_position_std", "obstacle_velocity_std",
                                                    "robot_xy_std", "robot_theta_std", "scale")},
        "timeout": sc.timeout,
        "seed": sc.seed,
        "config": copy.deepcopy(sc.config),
    }


def parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-path ``key=value`` overrides to a scenario structure (last writer wins)."""
    out = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ScenarioError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        if isinstance(node, list):
            node[int(parts[-1])] = parse_override_value(raw)
        else:
            node[parts[-1]] = parse_override_value(raw)
    return out


def load_scenario_dict(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_scenario(path, overrides=()) -> Scenario:
    return scenario_from_dict(apply_overrides(load_scenario_dict(path), overrides))


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


def crossing_scenario(seed: int, scale: float = 1.0, n_robots: int = 5, n_dynamic: int = 4,
                    n_static: int = 6, radius: float = 5.0, timeout: float = 60.0) -> Scenario:
    """Randomized 5-robot crossing scenario among dynamic and static obstacles.

    Robots start evenly spaced on a circle and swap to antipodal goals; static
    boxes/circles and wall-bouncing dynamic obstacles are scattered around the
    middle of the arena. The layout depends only on ``seed``.
    """
    rng = derive_rng(seed, STREAM_LAYOUT, 0)
    half = radius + 1.5
    arena = Arena(-half, half, -half, half)
    phase = rng.uniform(0, 2 * np.pi)
    robots = []
    for i in range(n_robots):
        ang = phase + 2 * np.pi * i / n_robots
        start = radius * np.array([np.cos(ang), np.sin(ang)])
        robots.append(RobotSpec([start[0], start[1], wrap_angle(ang + np.pi)], -start, i, 0.15))
    ends = np.array([r.start[:2] for r in robots] + [r.goal for r in robots])
    statics = []
    while len(statics) < n_static:
        c = rng.uniform(-0.75 * radius, 0.75 * radius, 2)
        if np.min(np.hypot(*(ends - c).T)) < 1.8:
            continue
        if any(np.hypot(*(c - s.center)) < 1.6 for s in statics):
            continue
        if rng.uniform() < 0.5:
            statics.append(BoxObstacle(c, rng.uniform(0.25, 0.5, 2)))
        else:
            statics.append(CircleObstacle(c, rng.uniform(0.25, 0.45)))
    dynamics = []
    for _ in range(n_dynamic):
        p = rng.uniform(-0.6 * radius, 0.6 * radius, 2)
        heading = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.2, 0.4)
        dynamics.append(DynamicObstacleSpec(
            ObstacleState(p, speed * np.array([np.cos(heading), np.sin(heading)]), 0.2),
            max_speed=0.5))
    return Scenario(arena, tuple(robots), tuple(statics), tuple(dynamics),
                    NoiseModel(scale=scale), timeout, seed)
