"""Self-sampled reference windows and the bounded tracking OCP.

The OCP is transcribed by single shooting over the wheel-speed sequence and
solved by projected Gauss-Newton iterations on the box of wheel speeds. The predicted state
``z_{k+1}`` reached after applying ``u_k`` is compared against reference
pose ``k`` of the window, so the window should start one control step ahead
of the current time (see :class:`EmpcTracker`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .minco import Trajectory
from .omni import EsoState, RobotModel, check_stability, eso_update, rotation, wheel_to_twist
from .world import wrap_angle

YAW_MIN_SPEED = 0.05


@dataclass(frozen=True)
class TrackerConfig:
    horizon: int = 5
    dt: float = 0.1
    weight_track: float = 10.0          # lambda_p
    weight_input: float = 0.01          # lambda_u
    theta_weight_ratio: float = 0.2
    z_lb: tuple = (-math.inf, -math.inf, -math.inf)
    z_ub: tuple = (math.inf, math.inf, math.inf)
    u_lb: float = -1.0
    u_ub: float = 1.0
    state_penalty: float = 1e4
    tol: float = 1e-9
    max_iter: int = 100
    eso_bandwidth: float = 0.5          # l1 = 2w = 1, l2 = w^2 = 0.25

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.weight_track > 0 and self.weight_input > 0):
            raise ValueError("tracking and input weights must be positive")
        if np.any(np.asarray(self.z_lb) > np.asarray(self.z_ub)) or self.u_lb > self.u_ub:
            raise ValueError("lower bounds must not exceed upper bounds")


@dataclass(frozen=True)
class ReferenceWindow:
    times: np.ndarray     # (H,)
    poses: np.ndarray     # (H, 3)
    clamped: bool = False


@dataclass
class OcpResult:
    u0: np.ndarray
    inputs: np.ndarray        # (H, 3)
    states: np.ndarray        # (H + 1, 3), states[0] = z0
    objective: float
    iterations: int
    converged: bool


def yaw_reference(velocities, previous: float, min_speed: float = YAW_MIN_SPEED) -> np.ndarray:
    """Heading along the planned velocity, holding the last value while nearly stopped."""
    out = np.empty(len(velocities))
    yaw = previous
    for i, v in enumerate(velocities):
        if math.hypot(v[0], v[1]) >= min_speed:
            yaw = math.atan2(v[1], v[0])
        out[i] = yaw
    return out


def sample_reference(traj: Trajectory, traj_start: float, t0: float, cfg: TrackerConfig,
                     previous_yaw: float = 0.0) -> ReferenceWindow:
    """Evaluate the planned trajectory at t0 + (k-1) dt, k = 1..H (absolute times)."""
    times = t0 + cfg.dt * np.arange(cfg.horizon)
    local = times - traj_start
    pos, clamped = traj.eval(local, 0, with_flag=True)
    vel = np.where(clamped[:, None], 0.0, traj.eval(local, 1))
    yaw = yaw_reference(vel, previous_yaw)
    poses = np.column_stack([pos, yaw])
    return ReferenceWindow(times, poses, bool(local[0] < 0))


def _bounds_arrays(cfg: TrackerConfig):
    return np.asarray(cfg.z_lb, dtype=float), np.asarray(cfg.z_ub, dtype=float)


def rollout(z0, inputs, model: RobotModel, dt: float, disturbance=None) -> np.ndarray:
    """Forward-Euler prediction z_{k+1} = z_k + dt (A(theta_k) M^-1 u_k + d)."""
    d = np.zeros(3) if disturbance is None else np.asarray(disturbance, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    z = np.empty((len(inputs) + 1, 3))
    z[0] = z0
    for k, u in enumerate(inputs):
        z[k + 1] = z[k] + dt * (rotation(z[k, 2]) @ (model.wheel_matrix_inv @ u) + d)
    return z


def _predict(U, z0, cfg: TrackerConfig, model: RobotModel, d):
    """Rollout plus state sensitivities dz_{k+1}/dU, shape (H, 3, 3H)."""
    H, dt = cfg.horizon, cfg.dt
    minv = model.wheel_matrix_inv
    body = U @ minv.T
    z = np.empty((H + 1, 3))
    z[0] = z0
    jac = np.zeros((H + 1, 3, 3 * H))
    for k in range(H):
        c, s = math.cos(z[k, 2]), math.sin(z[k, 2])
        a = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        vb = body[k]
        z[k + 1] = z[k] + dt * (a @ vb + d)
        # d z_{k+1} / d z_k = I + dt * dA/dtheta v e_theta^T
        jac[k + 1] = jac[k]
        jac[k + 1, 0] += dt * (-s * vb[0] - c * vb[1]) * jac[k, 2]
        jac[k + 1, 1] += dt * (c * vb[0] - s * vb[1]) * jac[k, 2]
        jac[k + 1, :, 3 * k:3 * k + 3] += dt * (a @ minv)
    return z, jac[1:]


def _terms(U, z0, ref: ReferenceWindow, cfg: TrackerConfig, model: RobotModel, d):
    z, jac = _predict(U, z0, cfg, model, d)
    w = cfg.weight_track * np.array([1.0, 1.0, cfg.theta_weight_ratio])
    lb, ub = _bounds_arrays(cfg)
    err = z[1:] - ref.poses
    err[:, 2] = wrap_angle(err[:, 2])
    over = np.maximum(z[1:] - ub, 0.0)
    under = np.maximum(lb - z[1:], 0.0)
    value = (float(np.sum(w * err * err)) + cfg.weight_input * float(np.sum(U * U))
             + cfg.state_penalty * float(np.sum(over**2 + under**2)))
    return value, z, jac, w, err, over, under


def ocp_objective(flat_inputs, z0, ref: ReferenceWindow, cfg: TrackerConfig, model: RobotModel,
                  disturbance=None, with_grad: bool = True):
    """Single-shooting objective (and gradient) over the stacked wheel speeds."""
    U = np.asarray(flat_inputs, dtype=float).reshape(cfg.horizon, 3)
    d = np.zeros(3) if disturbance is None else np.asarray(disturbance, dtype=float)
    value, _, jac, w, err, over, under = _terms(U, z0, ref, cfg, model, d)
    if not with_grad:
        return value
    gz = 2.0 * w * err + 2.0 * cfg.state_penalty * (over - under)
    grad = np.einsum("kij,ki->j", jac, gz) + 2.0 * cfg.weight_input * U.ravel()
    return value, grad


def _gauss_newton_hessian(jac, w, over, under, cfg: TrackerConfig):
    active = cfg.state_penalty * ((over > 0) | (under > 0))
    diag = 2.0 * (w + active)                      # (H, 3)
    hess = np.einsum("kij,ki,kil->jl", jac, diag, jac)
    hess[np.diag_indices_from(hess)] += 2.0 * cfg.weight_input
    return hess


def _projected_newton(x, lo, hi, z0, ref, cfg, model, d):
    """Bound-constrained Gauss-Newton with an epsilon-active set and projected Armijo search."""
    H = cfg.horizon
    f, _, jac, w, err, over, under = _terms(x.reshape(H, 3), z0, ref, cfg, model, d)
    it, converged = 0, False
    while True:
        gz = 2.0 * w * err + 2.0 * cfg.state_penalty * (over - under)
        g = np.einsum("kij,ki->j", jac, gz) + 2.0 * cfg.weight_input * x
        pg = x - np.clip(x - g, lo, hi)
        if float(np.max(np.abs(pg))) <= cfg.tol:
            converged = True
            break
        if it >= cfg.max_iter:
            break
        hess = _gauss_newton_hessian(jac, w, over, under, cfg)
        eps = min(1e-3, float(np.max(np.abs(pg))))
        fixed = ((x <= lo + eps) & (g > 0)) | ((x >= hi - eps) & (g < 0))
        free = ~fixed
        step = np.zeros_like(x)
        if np.any(free):
            step[free] = -np.linalg.solve(hess[np.ix_(free, free)], g[free])
        step[fixed] = -g[fixed] / np.diag(hess)[fixed]
        alpha, accepted = 1.0, False
        for _ in range(40):
            xn = np.clip(x + alpha * step, lo, hi)
            fn, zn, jn, wn, en, on, un = _terms(xn.reshape(H, 3), z0, ref, cfg, model, d)
            if fn <= f + 1e-4 * float(g @ (xn - x)):
                accepted = True
                break
            alpha *= 0.5
        it += 1
        if not accepted or fn >= f and np.allclose(xn, x, rtol=0.0, atol=1e-15):
            break
        x, f, jac, w, err, over, under = xn, fn, jn, wn, en, on, un
    return x, f, it, converged


def solve_ocp(z0, ref: ReferenceWindow, cfg: TrackerConfig, model: RobotModel,
              disturbance=None, warm=None) -> OcpResult:
    """Minimize the tracking objective over bounded wheel-speed sequences."""
    z0 = np.asarray(z0, dtype=float).reshape(3)
    if not np.all(np.isfinite(z0)) or not np.all(np.isfinite(ref.poses)):
        raise ValueError("initial state and reference must be finite")
    d = np.zeros(3) if disturbance is None else np.asarray(disturbance, dtype=float)
    H = cfg.horizon
    lo, hi = max(cfg.u_lb, model.u_lb), min(cfg.u_ub, model.u_ub)
    x0 = np.zeros(3 * H) if warm is None else np.clip(np.asarray(warm, dtype=float).ravel(), lo, hi)
    x, obj, it, converged = _projected_newton(x0, lo, hi, z0, ref, cfg, model, d)
    if lo <= 0.0 <= hi:
        zero_obj = ocp_objective(np.zeros(3 * H), z0, ref, cfg, model, d, with_grad=False)
        if zero_obj < obj:
            x, obj = np.zeros(3 * H), zero_obj
    U = x.reshape(H, 3)
    return OcpResult(U[0].copy(), U, rollout(z0, U, model, cfg.dt, d), float(obj), it, converged)


@dataclass
class EmpcTracker:
    """ESO-compensated MPC tracking the latest published trajectory."""

    model: RobotModel
    cfg: TrackerConfig
    eso: EsoState
    command: np.ndarray = field(default_factory=lambda: np.zeros(3))
    warm: np.ndarray | None = None
    yaw: float = 0.0
    last: OcpResult | None = None

    @classmethod
    def create(cls, z0, model: RobotModel = RobotModel(), cfg: TrackerConfig = TrackerConfig(),
               observer_dt: float = 0.01) -> "EmpcTracker":
        eso = EsoState.from_bandwidth(cfg.eso_bandwidth, z0)
        check_stability(eso, observer_dt)
        return cls(model, cfg, eso, yaw=float(z0[2]))

    def observe(self, measured_pose, dt: float) -> None:
        u = wheel_to_twist(self.command, self.eso.z_hat[2], self.model)
        self.eso = eso_update(self.eso, measured_pose, u, dt)

    def control(self, traj: Trajectory, traj_start: float, t_now: float) -> np.ndarray:
        ref = sample_reference(traj, traj_start, t_now + self.cfg.dt, self.cfg, self.yaw)
        self.yaw = float(ref.poses[0, 2])
        warm = None
        if self.warm is not None:
            warm = np.vstack([self.warm[1:], self.warm[-1:]])
        res = solve_ocp(self.eso.z_hat, ref, self.cfg, self.model, self.eso.d_hat, warm)
        self.warm = res.inputs
        self.command = res.u0
        self.last = res
        return res.u0
