"""Linear 2-DOF bicycle model with forward-Euler discretization.

Lateral state is [Y, beta, psi, psi_dot]; outputs are (Y, beta, psi_dot).
Longitudinal motion is a plain point mass that can only brake.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

MIN_SPEED = 0.1


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1530.0
    i_z: float = 2315.0
    l_f: float = 1.232
    l_r: float = 1.468
    c_f: float = 66900.0
    c_r: float = 66900.0
    l_w: float = 1.6
    length: float = 4.7

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"vehicle parameter {k} must be positive")


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    beta: float = 0.0
    psi: float = 0.0
    psi_dot: float = 0.0
    v: float = 0.0

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be nonnegative")
        if abs(self.beta) >= math.pi / 2:
            raise ValueError("|beta| must stay below pi/2")

    @property
    def lateral(self) -> np.ndarray:
        return np.array([self.y, self.beta, self.psi, self.psi_dot])

    def with_lateral(self, z) -> "VehicleState":
        return replace(self, y=float(z[0]), beta=float(z[1]), psi=float(z[2]), psi_dot=float(z[3]))


@dataclass(frozen=True)
class DiscreteSS:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    t_s: float


OUTPUT_SELECTOR = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 0, 1.0]])


def continuous_derivatives(state: VehicleState, delta_f: float, params: VehicleParams):
    """(beta_dot, psi_ddot, F_yf, F_yr); frozen (all zero) below MIN_SPEED."""
    V = state.v
    if V <= MIN_SPEED:
        return 0.0, 0.0, 0.0, 0.0
    p = params
    f_yf = p.c_f * (delta_f - state.beta - p.l_f * state.psi_dot / V)
    f_yr = p.c_r * (-state.beta + p.l_r * state.psi_dot / V)
    beta_dot = (f_yf + f_yr) / (p.m * V) - state.psi_dot
    psi_ddot = (p.l_f * f_yf - p.l_r * f_yr) / p.i_z
    return beta_dot, psi_ddot, f_yf, f_yr


def discretize(params: VehicleParams, v: float, t_s: float) -> DiscreteSS:
    if v <= MIN_SPEED:
        raise ValueError(f"speed {v} is below the model threshold {MIN_SPEED}")
    p = params
    T, V = t_s, v
    A = np.array([
        [1.0, T * V, T * V, 0.0],
        [0.0, 1 - T * (p.c_r + p.c_f) / (p.m * V), 0.0,
         T * (p.c_r * p.l_r - p.c_f * p.l_f) / (p.m * V**2) - T],
        [0.0, 0.0, 1.0, T],
        [0.0, T * (p.c_r * p.l_r - p.c_f * p.l_f) / p.i_z, 0.0,
         1 - T * (p.c_r * p.l_r**2 + p.c_f * p.l_f**2) / (p.i_z * V)],
    ])
    B = np.array([[0.0], [T * p.c_f / (p.m * V)], [0.0], [T * p.c_f * p.l_f / p.i_z]])
    return DiscreteSS(A, B, OUTPUT_SELECTOR.copy(), T)


def euler_substeps(params: VehicleParams, v: float, t_s: float) -> int:
    """Number of equal sub-steps keeping every diagonal Euler factor of the
    lateral model inside (-1, 1]; 1 at normal driving speeds."""
    p = params
    rate = max((p.c_r + p.c_f) / (p.m * v), (p.c_r * p.l_r**2 + p.c_f * p.l_f**2) / (p.i_z * v))
    return max(1, int(math.ceil(t_s * rate)))


def step(state: VehicleState, delta_f: float, params: VehicleParams, t_s: float,
         braking: float | None = None) -> VehicleState:
    """Advance one sample. X uses the speed at the start of the step."""
    if t_s <= 0:
        raise ValueError("t_s must be positive")
    x_next = state.x + t_s * state.v * math.cos(state.psi)
    if state.v > MIN_SPEED:
        # Euler is only stable while T*rate < 2; split the step at crawl speeds
        n = euler_substeps(params, state.v, t_s)
        ss = discretize(params, state.v, t_s / n)
        lat = state.lateral
        for _ in range(n):
            lat = ss.A @ lat + ss.B[:, 0] * delta_f
    else:
        lat = state.lateral
    v_next = state.v
    if braking is not None and braking > 0:
        v_next = max(0.0, state.v - braking * t_s)
    return replace(state.with_lateral(lat), x=x_next, v=v_next)


def rk4_lateral(state: VehicleState, delta_f: float, params: VehicleParams, dt: float,
                steps: int) -> VehicleState:
    """Fine reference integration of the continuous lateral dynamics at
    constant speed (Y_dot = V (beta + psi), small angles)."""

    def deriv(z):
        s = VehicleState(0.0, z[0], z[1], z[2], z[3], state.v)
        bd, pdd, _, _ = continuous_derivatives(s, delta_f, params)
        return np.array([state.v * (z[1] + z[2]), bd, z[3], pdd])

    z = state.lateral.astype(float)
    for _ in range(steps):
        k1 = deriv(z)
        k2 = deriv(z + 0.5 * dt * k1)
        k3 = deriv(z + 0.5 * dt * k2)
        k4 = deriv(z + dt * k3)
        z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return replace(state.with_lateral(z), x=state.x + state.v * dt * steps)
