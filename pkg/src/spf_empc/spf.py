"""Elliptic Gaussian safety probability field around a moving obstacle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import ObstacleState


@dataclass(frozen=True)
class SpfParams:
    """Field construction parameters.

    attention: weight on the current position (0 centers the field a full
        ``dt`` ahead, 1 keeps it on the obstacle).
    dt: sampling interval used to shift the center.
    lookahead: time used to stretch the major axis; ``None`` means ``dt``.
    threshold: absolute field level marking danger. ``None`` derives a
        per-field level so that the danger region on the minor axis extends
        ``inflation`` beyond the obstacle radius.
    """

    attention: float = 0.5
    dt: float = 0.5
    lookahead: float | None = None
    threshold: float | None = None
    inflation: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.attention <= 1.0:
            raise ValueError("attention must lie in [0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.lookahead is not None and not self.lookahead >= 0:
            raise ValueError("lookahead must be non-negative")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not self.inflation >= 0:
            raise ValueError("inflation must be non-negative")

    @property
    def horizon(self) -> float:
        return self.dt if self.lookahead is None else self.lookahead


@dataclass(frozen=True)
class SafetyField:
    center: np.ndarray
    cov: np.ndarray
    cov_inv: np.ndarray
    det: float
    a: float
    b: float
    heading: float
    threshold: float
    obstacle: ObstacleState

    @property
    def peak(self) -> float:
        return 1.0 / (2.0 * math.pi * math.sqrt(self.det))

    def with_threshold(self, threshold: float) -> "SafetyField":
        return SafetyField(self.center, self.cov, self.cov_inv, self.det, self.a, self.b,
                           self.heading, float(threshold), self.obstacle)


def level_at(a: float, b: float, inflation: float) -> float:
    """Field level on the minor axis at distance ``b + inflation`` from the center."""
    k = (b + inflation) / b
    return math.exp(-0.5 * k * k) / (2.0 * math.pi * a * b)


def build_field(o: ObstacleState, params: SpfParams) -> SafetyField:
    p = np.asarray(o.position, dtype=float)
    v = np.asarray(o.velocity, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v)) and math.isfinite(o.radius)):
        raise ValueError("obstacle state must be finite")
    if not o.radius > 0:
        raise ValueError("obstacle radius must be positive")
    speed = float(np.hypot(v[0], v[1]))
    heading = math.atan2(v[1], v[0]) if speed > 0 else 0.0
    a = o.radius + speed * params.horizon / 2.0
    b = o.radius
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([a * a, b * b]) @ rot.T
    cov = 0.5 * (cov + cov.T)
    cov_inv = rot @ np.diag([1.0 / (a * a), 1.0 / (b * b)]) @ rot.T
    cov_inv = 0.5 * (cov_inv + cov_inv.T)
    center = p + (1.0 - params.attention) * v * params.dt
    thr = params.threshold if params.threshold is not None else level_at(a, b, params.inflation)
    return SafetyField(center, cov, cov_inv, (a * b) ** 2, a, b, heading, thr, o)


def field_value(f: SafetyField, p) -> np.ndarray | float:
    """Gaussian density of the field at one point (2,) or many points (m, 2)."""
    p = np.asarray(p, dtype=float)
    d = p - f.center
    m = np.einsum("...i,ij,...j->...", d, f.cov_inv, d)
    u = np.exp(-0.5 * m) * f.peak
    return float(u) if u.ndim == 0 else u


def field_gradient(f: SafetyField, p) -> np.ndarray:
    """dU/dp = -U * inv(Sigma) (p - center)."""
    p = np.asarray(p, dtype=float)
    d = p - f.center
    u = np.asarray(field_value(f, p))
    return -u[..., None] * (d @ f.cov_inv)


def safe_direction(f: SafetyField, p) -> np.ndarray:
    """Unit vector of steepest descent of the field at ``p``.

    Falls back to the left normal of the obstacle velocity (or +x for a
    stationary obstacle) where the gradient vanishes.
    """
    # -grad U is U * inv(Sigma) d; U > 0 drops out after normalization
    d = np.asarray(p, dtype=float) - f.center
    g = f.cov_inv @ d
    n = float(np.hypot(g[0], g[1]))
    if np.hypot(d[0], d[1]) > 1e-12 and n > 0:
        return g / n
    v = f.obstacle.velocity
    sp = float(np.hypot(v[0], v[1]))
    if sp > 0:
        return np.array([-v[1], v[0]]) / sp
    return np.array([1.0, 0.0])
