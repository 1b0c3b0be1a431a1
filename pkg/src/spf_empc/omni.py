"""Three-wheeled omnidirectional robot model and per-axis extended state observer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import wrap_angle

_C60, _S60 = math.cos(math.radians(60.0)), math.sin(math.radians(60.0))


def rotation(theta: float) -> np.ndarray:
    """Body-to-world transform A(theta) acting on [vx, vy, omega]."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RobotModel:
    wheel_offset: float = 0.04     # L
    wheel_radius: float = 0.029    # R
    mass: float = 1.5              # M
    inertia: float = 0.01          # I
    u_lb: float = -1.0             # wheel linear speed bounds, m/s
    u_ub: float = 1.0
    wheel_matrix: np.ndarray = field(init=False, repr=False)
    wheel_matrix_inv: np.ndarray = field(init=False, repr=False)
    dynamics_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.wheel_radius, self.mass, self.inertia) <= 0:
            raise ValueError("wheel radius, mass and inertia must be positive")
        if not self.u_lb < self.u_ub:
            raise ValueError("u_lb must be below u_ub")
        L = self.wheel_offset
        mw = np.array([[0.0, -1.0, -L], [_C60, _S60, -L], [-_C60, _S60, -L]])
        object.__setattr__(self, "wheel_matrix", mw)
        object.__setattr__(self, "wheel_matrix_inv", np.linalg.inv(mw))
        mr, ir = self.mass * self.wheel_radius, self.inertia * self.wheel_radius
        r3 = math.sqrt(3.0)
        d = np.array([[-r3 / (2 * mr), -r3 / (2 * mr), 0.0],
                      [-1.0 / (2 * mr), -1.0 / (2 * mr), 1.0 / mr],
                      [-L / ir, -L / ir, -L / ir]])
        object.__setattr__(self, "dynamics_matrix", d)


def wheel_to_twist(wheels, theta: float, model: RobotModel) -> np.ndarray:
    """World-frame [v_wx, v_wy, omega] produced by wheel speeds at heading ``theta``."""
    return rotation(theta) @ (model.wheel_matrix_inv @ np.asarray(wheels, dtype=float))


def twist_to_wheel(body_twist, model: RobotModel) -> np.ndarray:
    """Wheel speeds realizing a body-frame twist."""
    return model.wheel_matrix @ np.asarray(body_twist, dtype=float)


def world_twist_to_wheel(world_twist, theta: float, model: RobotModel) -> np.ndarray:
    return twist_to_wheel(rotation(theta).T @ np.asarray(world_twist, dtype=float), model)


def torque_to_accel(torques, theta: float, model: RobotModel) -> np.ndarray:
    """World-frame acceleration [dv_wx, dv_wy, domega] from wheel torques."""
    return rotation(theta) @ (model.dynamics_matrix @ np.asarray(torques, dtype=float))


@dataclass(frozen=True)
class EsoState:
    """Per-axis linear ESO: estimated state, estimated lumped disturbance, gains."""

    z_hat: np.ndarray
    d_hat: np.ndarray
    l1: float = 1.0
    l2: float = 0.25
    b: float = 1.0
    angular: tuple = (False, False, True)   # axes whose innovation is angle-wrapped

    @classmethod
    def from_bandwidth(cls, w: float, z0, b: float = 1.0, **kw) -> "EsoState":
        """Gains placing both observer poles at -w."""
        if not w > 0:
            raise ValueError("observer bandwidth must be positive")
        z0 = np.atleast_1d(np.asarray(z0, dtype=float))
        return cls(z0.copy(), np.zeros_like(z0), 2.0 * w, w * w, b, **kw)

    @property
    def bandwidth(self) -> float:
        return math.sqrt(self.l2)


def spectral_radius(l1: float, l2: float, dt: float) -> float:
    """Spectral radius of the forward-Euler ESO error dynamics."""
    m = np.array([[1.0 - l1 * dt, dt], [-l2 * dt, 1.0]])
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def check_stability(eso: EsoState, dt: float) -> float:
    rho = spectral_radius(eso.l1, eso.l2, dt)
    if rho >= 1.0:
        raise ValueError(f"ESO discretization unstable at dt={dt} (spectral radius {rho:.4f})")
    return rho


def eso_update(eso: EsoState, z, u, dt: float) -> EsoState:
    """One forward-Euler step of the observer with measurement ``z`` and input ``u``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=float).reshape(eso.z_hat.shape)
    u = np.asarray(u, dtype=float).reshape(eso.z_hat.shape)
    e = eso.z_hat - z
    if eso.z_hat.size == 3:
        e = np.where(np.asarray(eso.angular), wrap_angle(e), e)
    z_hat = eso.z_hat + dt * (eso.d_hat - eso.l1 * e + eso.b * u)
    d_hat = eso.d_hat - dt * eso.l2 * e
    if eso.z_hat.size == 3 and eso.angular[2]:
        z_hat = z_hat.copy()
        z_hat[2] = wrap_angle(z_hat[2])
    return EsoState(z_hat, d_hat, eso.l1, eso.l2, eso.b, eso.angular)
