"""Adaptive artificial potential field on a straight multi-lane road.

All evaluators accept scalars or numpy arrays (broadcast together) so the
planners can sample whole grids in one call. On a straight road the Frenet
frame is the road-aligned (X, Y) frame, so ``s = X`` and ``d = Y``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class RoadGeometry:
    lower_edge_y: float = 0.0
    upper_edge_y: float = 8.0
    lane_divider_ys: tuple = (4.0,)
    esl_lower_y: float = -4.0
    lane_width: float = 4.0

    def __post_init__(self):
        ys = tuple(float(v) for v in self.lane_divider_ys)
        object.__setattr__(self, "lane_divider_ys", ys)
        if not self.lower_edge_y < self.upper_edge_y:
            raise ValueError("lower_edge_y must be below upper_edge_y")
        if any(b <= a for a, b in zip(ys, ys[1:])):
            raise ValueError("lane dividers must be strictly increasing")
        if ys and (ys[0] <= self.lower_edge_y or ys[-1] >= self.upper_edge_y):
            raise ValueError("lane dividers must lie strictly inside the road")
        if self.esl_lower_y > self.lower_edge_y:
            raise ValueError("the emergency stopping lane lies below the lower edge")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")

    @property
    def lane_centers(self) -> tuple:
        edges = (self.lower_edge_y, *self.lane_divider_ys, self.upper_edge_y)
        return tuple(0.5 * (a + b) for a, b in zip(edges, edges[1:]))


@dataclass(frozen=True)
class ApfConfig:
    """Field amplitudes and shape parameters.

    ``sigma_*`` and ``k_*`` map obstacle accelerations to the Gaussian
    spreads; ``headway`` (seconds) places the second Gaussian behind the
    obstacle.
    """

    a_lane: float = 20.0
    a_obs: float = 150.0
    zeta: float = 1.0
    eta: float = 3.0
    target_scale: float = 100.0
    w1: float = 0.8
    edge_clamp_distance: float = 0.05
    gradient_step: float = 0.05
    sigma_s0: float = 3.0
    sigma_d0: float = 1.0
    k_s: float = 0.5
    k_d: float = 0.5
    headway: float = 0.5

    def __post_init__(self):
        for name in ("a_lane", "a_obs", "zeta", "eta", "target_scale", "edge_clamp_distance",
                     "gradient_step", "sigma_s0", "sigma_d0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.5 <= self.w1 <= 1.0:
            raise ValueError("w1 must lie in [0.5, 1]")
        if self.k_s < 0 or self.k_d < 0 or self.headway < 0:
            raise ValueError("k_s, k_d and headway must be nonnegative")


@dataclass(frozen=True)
class ObstaclePfParams:
    mu1: tuple
    mu2: tuple
    sigma_s1: float
    sigma_d1: float
    sigma_s2: float
    sigma_d2: float

    def __post_init__(self):
        if min(self.sigma_s1, self.sigma_d1, self.sigma_s2, self.sigma_d2) <= 0:
            raise ValueError("obstacle sigmas must be strictly positive")

    @classmethod
    def from_motion(cls, s: float, d: float, speed: float, a_long: float, a_lat: float,
                    cfg: ApfConfig, adaptive: bool = True) -> "ObstaclePfParams":
        """Gaussian parameters for an obstacle at (s, d).

        With ``adaptive`` the spreads grow with the absolute accelerations;
        otherwise the base spreads are used (the conventional field).
        """
        if adaptive:
            sig_s = cfg.sigma_s0 + cfg.k_s * abs(a_long)
            sig_d = cfg.sigma_d0 + cfg.k_d * abs(a_lat)
        else:
            sig_s, sig_d = cfg.sigma_s0, cfg.sigma_d0
        mu2 = (s - cfg.headway * speed, d)
        return cls((s, d), mu2, sig_s, sig_d, sig_s, sig_d)


@dataclass(frozen=True)
class TargetPoint:
    x_r: float
    y_r: float


class Mode(enum.Enum):
    NORMAL = "normal"
    EMERGENCY = "emergency"


def lane_potential(y, road: RoadGeometry, cfg: ApfConfig):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    for yc in road.lane_divider_ys:
        out = out + cfg.a_lane * np.exp(-((y - yc) ** 2) / (2.0 * cfg.zeta**2))
    return out if out.ndim else float(out)


def edge_potential(y, road: RoadGeometry, cfg: ApfConfig, lower: bool = True, upper: bool = True):
    """Repulsion of the road edges; distances below the clamp are evaluated at
    the clamp so the value stays finite on and beyond the edges."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    c = cfg.edge_clamp_distance
    if lower:
        dist = np.maximum(y - road.lower_edge_y, c)
        out = out + 0.5 * cfg.eta / dist**2
    if upper:
        dist = np.maximum(road.upper_edge_y - y, c)
        out = out + 0.5 * cfg.eta / dist**2
    return out if out.ndim else float(out)


def _gaussian(s, d, mu, sig_s, sig_d, amplitude):
    q = ((s - mu[0]) / sig_s) ** 2 + ((d - mu[1]) / sig_d) ** 2
    return amplitude / (2.0 * math.pi * sig_s * sig_d) * np.exp(-0.5 * q)


def obstacle_potential(s, d, params: ObstaclePfParams, cfg: ApfConfig):
    """Two-component Gaussian field of one obstacle, weights w1 and 1 - w1."""
    s = np.asarray(s, dtype=float)
    d = np.asarray(d, dtype=float)
    u1 = _gaussian(s, d, params.mu1, params.sigma_s1, params.sigma_d1, cfg.a_obs)
    u2 = _gaussian(s, d, params.mu2, params.sigma_s2, params.sigma_d2, cfg.a_obs)
    out = cfg.w1 * u1 + (1.0 - cfg.w1) * u2
    return out if np.ndim(out) else float(out)


def target_potential(x, y, target: TargetPoint, cfg: ApfConfig):
    out = (np.abs(np.asarray(x, dtype=float) - target.x_r)
           + np.abs(np.asarray(y, dtype=float) - target.y_r)) / cfg.target_scale
    return out if np.ndim(out) else float(out)


PotentialTerm = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class FieldContext:
    """Everything needed to evaluate the total field at a point.

    In ``Mode.NORMAL`` the field is lane + edges + obstacles + target, with
    the lower edge optionally dropped. In ``Mode.EMERGENCY`` the road terms
    and the target are replaced by ``extra_terms`` (the corridor and
    attractive terms of the escape path); obstacles stay.
    """

    road: RoadGeometry
    cfg: ApfConfig
    obstacles: Sequence[ObstaclePfParams] = ()
    target: TargetPoint | None = None
    mode: Mode = Mode.NORMAL
    lower_edge: bool = True
    extra_terms: Sequence[PotentialTerm] = field(default_factory=tuple)


def total_potential(x, y, ctx: FieldContext):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    out = np.zeros(x.shape)
    for obs in ctx.obstacles:
        out = out + obstacle_potential(x, y, obs, ctx.cfg)
    if ctx.mode is Mode.NORMAL:
        out = out + lane_potential(y, ctx.road, ctx.cfg)
        out = out + edge_potential(y, ctx.road, ctx.cfg, lower=ctx.lower_edge)
        if ctx.target is not None:
            out = out + target_potential(x, y, ctx.target, ctx.cfg)
    for term in ctx.extra_terms:
        out = out + term(x, y)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GradientResult:
    force: tuple
    psi_ref: float


@dataclass(frozen=True)
class LocalMinimum:
    """The force vanished: no heading can be derived at this point."""

    point: tuple
    force_norm: float


def field_force(x, y, ctx: FieldContext, h: float | None = None):
    """Negative central-difference gradient, vectorized over points."""
    h = ctx.cfg.gradient_step if h is None else h
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fx = -(total_potential(x + h, y, ctx) - total_potential(x - h, y, ctx)) / (2 * h)
    fy = -(total_potential(x, y + h, ctx) - total_potential(x, y - h, ctx)) / (2 * h)
    return fx, fy


def descend_gradient(x: float, y: float, ctx: FieldContext, h: float | None = None,
                     tol: float = 1e-10) -> GradientResult | LocalMinimum:
    fx, fy = field_force(x, y, ctx, h)
    fx, fy = float(fx), float(fy)
    norm = math.hypot(fx, fy)
    if norm < tol:
        return LocalMinimum((float(x), float(y)), norm)
    return GradientResult((fx, fy), math.atan2(fy, fx))


def lateral_valley(x: float, y_near: float, ctx: FieldContext, y_lo: float, y_hi: float,
                   resolution: float = 0.05) -> float:
    """Lateral position of the field minimum at station ``x`` reached by
    walking downhill from ``y_near`` inside [y_lo, y_hi].

    The walk runs on a grid; an interior minimum is then refined to the sign
    change of dU/dy with Brent's method. If the field keeps falling the
    result is the band limit.
    """
    from scipy.optimize import brentq

    if y_hi <= y_lo:
        return float(np.clip(y_near, y_lo, y_hi))
    n = max(3, int(math.ceil((y_hi - y_lo) / resolution)) + 1)
    ys = np.linspace(y_lo, y_hi, n)
    u = total_potential(np.full(n, x), ys, ctx)
    i = int(np.clip(np.searchsorted(ys, y_near), 0, n - 1))
    while True:
        if i > 0 and u[i - 1] < u[i]:
            j = i - 1
        elif i < n - 1 and u[i + 1] < u[i]:
            j = i + 1
        else:
            break
        i = j
    if i == 0 or i == n - 1:
        return float(ys[i])
    h = ctx.cfg.gradient_step

    def dudy(y):
        return float(total_potential(x, y + h, ctx) - total_potential(x, y - h, ctx))

    a, b = ys[i - 1], ys[i + 1]
    if dudy(a) < 0 < dudy(b):
        return float(brentq(dudy, a, b, xtol=1e-12, rtol=1e-12))
    return float(ys[i])
