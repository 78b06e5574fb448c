"""Cubic clothoid approximation: evaluation, frame change and fitting.

The lateral profile is f(r) = c0 + c1 r + c2 r^2 + c3 r^3 with curvature
6 c3 r + 2 c2. Fitting is done over the vehicle-frame abscissa x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qp_core

GRAVITY = 9.81


@dataclass(frozen=True)
class ClothoidCoefficients:
    c0: float
    c1: float
    c2: float
    c3: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("clothoid coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.c0, self.c1, self.c2, self.c3], dtype=float)

    @classmethod
    def from_array(cls, c) -> "ClothoidCoefficients":
        c = np.asarray(c, dtype=float).reshape(4)
        return cls(*(float(v) for v in c))

    def value(self, r):
        r = np.asarray(r, dtype=float)
        return self.c0 + r * (self.c1 + r * (self.c2 + r * self.c3))

    def slope(self, r):
        r = np.asarray(r, dtype=float)
        return self.c1 + r * (2 * self.c2 + 3 * self.c3 * r)

    def curvature(self, r):
        return 6.0 * self.c3 * np.asarray(r, dtype=float) + 2.0 * self.c2


def eval(c: ClothoidCoefficients, r):  # noqa: A001 - mirrors the operation name
    """Lateral value and curvature at ``r``."""
    return c.value(r), c.curvature(r)


@dataclass(frozen=True)
class FitBounds:
    e_y_min: float = -0.7
    e_y_max: float = 0.7
    e_psi_min: float = -0.05
    e_psi_max: float = 0.05
    omega_max: float = 4.9
    upsilon: float = 0.75
    g: float = GRAVITY
    kappa_dot_max: float = 0.01
    r_min: float = 6.12

    def __post_init__(self):
        if not (self.e_y_min < self.e_y_max and self.e_psi_min < self.e_psi_max):
            raise ValueError("each bound pair needs min < max")
        for name in ("omega_max", "upsilon", "g", "kappa_dot_max", "r_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def c2_bound(self) -> float:
        return self.omega_max**2 / (2.0 * self.upsilon * self.g)

    @property
    def c3_bound(self) -> float:
        return self.kappa_dot_max / 6.0

    @property
    def kappa_max(self) -> float:
        return 1.0 / self.r_min

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.e_y_min, self.e_psi_min, -self.c2_bound, -self.c3_bound])
        hi = np.array([self.e_y_max, self.e_psi_max, self.c2_bound, self.c3_bound])
        return lo, hi


def world_to_vehicle(points, pose) -> np.ndarray:
    """Translate by (-X, -Y), then rotate by -psi."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    X, Y, psi = pose
    c, s = math.cos(-psi), math.sin(-psi)
    dx = pts[:, 0] - X
    dy = pts[:, 1] - Y
    return np.column_stack([c * dx - s * dy, s * dx + c * dy])


def vehicle_to_world(points, pose) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    X, Y, psi = pose
    c, s = math.cos(psi), math.sin(psi)
    return np.column_stack([X + c * pts[:, 0] - s * pts[:, 1], Y + s * pts[:, 0] + c * pts[:, 1]])


def design_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones_like(x), x, x**2, x**3])


def _check_points(points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 4 or pts.shape[1] != 2:
        raise ValueError("need at least 4 (x, y) points")
    if np.unique(pts[:, 0]).size < 4:
        raise ValueError("need at least 4 distinct x values")
    return pts


def _weights(W, n) -> np.ndarray:
    if W is None:
        return np.ones(n)
    w = np.asarray(W, dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    if w.size != n:
        raise ValueError("weight count must match the number of points")
    if np.any(w < 0) or np.count_nonzero(w) < 4:
        raise ValueError("weights must be nonnegative with at least 4 positive entries")
    return w


def fit_ls(points) -> ClothoidCoefficients:
    pts = _check_points(points)
    X = design_matrix(pts[:, 0])
    c, *_ = np.linalg.lstsq(X, pts[:, 1], rcond=None)
    return ClothoidCoefficients.from_array(c)


def fit_weighted(points, W=None) -> ClothoidCoefficients:
    """Weighted fit ``((WX)'WX)^-1 (WX)'WF`` for diagonal W (given as a
    vector or a matrix)."""
    pts = _check_points(points)
    w = _weights(W, len(pts))
    WX = w[:, None] * design_matrix(pts[:, 0])
    WF = w * pts[:, 1]
    M = WX.T @ WX
    if np.linalg.matrix_rank(M) < 4:
        raise ValueError("weighted normal matrix is singular")
    return ClothoidCoefficients.from_array(np.linalg.solve(M, WX.T @ WF))


def fit_qp(points, W=None, bounds: FitBounds | None = None,
           kappa_stations=None, end_slope=None) -> ClothoidCoefficients:
    """Box-constrained weighted fit: minimize 0.5 c'Hc + f'c inside the
    coefficient box, with H = (WX)'(WX) and f = -(WX)'(WF) so that an
    interior optimum coincides with ``fit_weighted``.

    ``end_slope = (x, lo, hi)`` keeps the slope at abscissa x inside
    [lo, hi]. When ``kappa_stations`` is given, the curvature limit 1/R_min
    is also imposed at those abscissae whenever the first solution violates
    it.
    """
    bounds = bounds or FitBounds()
    pts = _check_points(points)
    w = _weights(W, len(pts))
    lo, hi = bounds.box()
    X = design_matrix(pts[:, 0])
    # column scaling keeps H well conditioned for x spans of tens of metres
    scale = max(1.0, float(np.abs(pts[:, 0]).max()))
    D = np.array([1.0, scale, scale**2, scale**3])
    Xs = X / D
    H = Xs.T @ ((w**2)[:, None] * Xs)
    f = -Xs.T @ (w**2 * pts[:, 1])
    H = 0.5 * (H + H.T)
    G = np.zeros((0, 4))
    h = np.zeros(0)
    if end_slope is not None:
        xe, s_lo, s_hi = map(float, end_slope)
        if s_lo > s_hi:
            raise ValueError("end slope band needs lo <= hi")
        row = np.array([0.0, 1.0, 2.0 * xe, 3.0 * xe**2]) / D
        G = np.vstack([row, -row])
        h = np.array([s_hi, -s_lo])

    def solve(G, h):
        prob = qp_core.QpProblem(H, f, G if len(h) else None, h if len(h) else None, lo * D, hi * D)
        res = qp_core.solve(prob)
        if not res.ok:
            raise ValueError(f"coefficient QP failed: {res.status}")
        return res.z / D

    c = solve(G, h)
    if kappa_stations is not None:
        r = np.asarray(kappa_stations, dtype=float)
        kappa = 6.0 * c[3] * r + 2.0 * c[2]
        if np.max(np.abs(kappa)) > bounds.kappa_max:
            rows = np.column_stack([np.zeros_like(r), np.zeros_like(r), 2.0 * np.ones_like(r), 6.0 * r])
            rows = rows / D
            G = np.vstack([G, rows, -rows])
            h = np.concatenate([h, np.full(2 * r.size, bounds.kappa_max)])
            c = solve(G, h)
    c = np.clip(c, lo, hi)
    return ClothoidCoefficients.from_array(c)


def weighted_objective(c, points, W=None) -> float:
    """0.5 c'Hc + f'c for the weighted fit (no scaling)."""
    pts = _check_points(points)
    w = _weights(W, len(pts)) ** 2
    X = design_matrix(pts[:, 0])
    c = np.asarray(c, dtype=float)
    H = X.T @ (w[:, None] * X)
    f = -X.T @ (w * pts[:, 1])
    return float(0.5 * c @ H @ c + f @ c)
