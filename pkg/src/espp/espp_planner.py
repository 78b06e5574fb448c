"""Emergency stopping path: where to stop and how to get there.

Geometry is done in world coordinates (road-aligned, y up, lower edge at
``road.lower_edge_y``). The fitted curve lives in the vehicle frame of the
ego pose at trigger time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon, box as shapely_box

from . import clothoid
from .clothoid import ClothoidCoefficients, FitBounds
from .potential_field import RoadGeometry


class NoFeasibleStopPoint(RuntimeError):
    """No candidate satisfies the stop-point constraints; the caller should
    fall back to straight-line braking in the current lane."""


@dataclass(frozen=True)
class EsppConfig:
    n_b2i: int = 6
    n_i2s: int = 10
    p_num: int = 50
    a_e: float = 10.0
    b_w: float = 0.3
    xi: float = 0.2
    delta_psi_o_max: float = 0.2
    corridor_half_width: float = 2.0
    grid_resolution: float = 0.25
    min_entry_heading: float = 0.1
    max_entry_heading: float = 0.4
    breach_weight: float = 10.0
    final_weight: float = 10.0
    lookahead_min: float = 2.0
    lookahead_time: float = 0.5

    def __post_init__(self):
        if self.n_b2i < 2 or self.n_i2s < 2:
            raise ValueError("interpolation counts must be at least 2")
        if min(self.a_e, self.b_w, self.xi) <= 0:
            raise ValueError("a_e, b_w and xi must be positive")
        if self.grid_resolution <= 0 or self.p_num < 1:
            raise ValueError("grid_resolution and p_num must be positive")
        if not 0 < self.min_entry_heading <= self.max_entry_heading:
            raise ValueError("need 0 < min_entry_heading <= max_entry_heading")


# ---------------------------------------------------------------- sector


@dataclass(frozen=True)
class MotionSector:
    """Circular sector swept by the obstacle over the prediction horizon."""

    apex: tuple
    heading: float
    alpha: float
    radius: float

    @property
    def area(self) -> float:
        return 0.5 * self.alpha * self.radius**2

    def polygon(self, n_arc: int = 48) -> Polygon:
        if self.radius <= 0 or self.alpha <= 0:
            return Polygon()
        a = self.heading + np.linspace(-0.5 * self.alpha, 0.5 * self.alpha, n_arc)
        xs = self.apex[0] + self.radius * np.cos(a)
        ys = self.apex[1] + self.radius * np.sin(a)
        return Polygon([self.apex, *zip(xs, ys)])

    def contains(self, x, y):
        """Exact point-in-sector test (boundary counts as inside)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx, dy = x - self.apex[0], y - self.apex[1]
        r = np.hypot(dx, dy)
        ang = np.angle(np.exp(1j * (np.arctan2(dy, dx) - self.heading)))
        inside = (r <= self.radius) & ((np.abs(ang) <= 0.5 * self.alpha) | (r == 0))
        return inside & (self.radius > 0)


def predict_motion_sector(x: float, y: float, heading: float, v_obs: float, n_p: int, t_s: float,
                          cfg: EsppConfig) -> MotionSector:
    if v_obs < 0:
        raise ValueError("obstacle speed must be nonnegative")
    return MotionSector((float(x), float(y)), float(heading), 2.0 * cfg.delta_psi_o_max,
                        n_p * v_obs * t_s)


# ---------------------------------------------------------------- regions


@dataclass
class EscapeRegion:
    """Box ahead of the breach split into S1..S4 around the sector S2.

    S3 is the part of the box under/over S2 (same x range), S4 lies before
    it and S1 after it. With no overlap between sector and box the whole box
    is S1.
    """

    x0: float
    x1: float
    y0: float
    y1: float
    sector: MotionSector
    s2: Polygon = field(init=False)
    dividing_points: tuple = field(init=False)

    def __post_init__(self):
        frame = shapely_box(self.x0, self.y0, self.x1, self.y1)
        self.s2 = self.sector.polygon().intersection(frame) if self.sector.radius > 0 else Polygon()
        pts = []
        if not self.s2.is_empty:
            for px, py in self.s2.exterior.coords[:-1]:
                on_edge = (abs(px - self.x0) < 1e-9 or abs(px - self.x1) < 1e-9
                           or abs(py - self.y0) < 1e-9 or abs(py - self.y1) < 1e-9)
                if on_edge:
                    pts.append((float(px), float(py)))
        pts = sorted(set(pts), key=lambda p: (-p[1], p[0]))
        self.dividing_points = tuple(pts[:3])

    @property
    def s2_x_range(self) -> tuple | None:
        if self.s2.is_empty:
            return None
        bx0, _, bx1, _ = self.s2.bounds
        return bx0, bx1

    def in_box(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    def classify(self, x, y):
        """Region label 1..4 per point (0 outside the box)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        lab = np.where(self.in_box(x, y), 1, 0)
        rng = self.s2_x_range
        if rng is None:
            return lab
        in_s2 = self.sector.contains(x, y) & (lab > 0)
        lab = np.where((lab > 0) & (x < rng[0]), 4, lab)
        lab = np.where((lab > 0) & (x >= rng[0]) & (x <= rng[1]), 3, lab)
        lab = np.where(in_s2, 2, lab)
        return lab


def build_region(p_bp, d_brake: float, road: RoadGeometry, sector: MotionSector) -> EscapeRegion:
    return EscapeRegion(float(p_bp[0]), float(p_bp[0]) + float(d_brake), road.esl_lower_y,
                        road.lower_edge_y, sector)


# ---------------------------------------------------------------- anchors


@dataclass(frozen=True)
class EsppAnchors:
    p_bp: tuple
    p_sp: tuple
    p_ip: tuple
    psi_espp: float
    l_espp: float


def build_anchors(p_bp, p_sp, heading: float) -> EsppAnchors:
    """Corner point where the entry ray (from the breach at ``heading``) meets
    the road-parallel line through the stop point."""
    xb, yb = map(float, p_bp)
    xs, ys = map(float, p_sp)
    if not xs > xb:
        raise ValueError("stop point must lie ahead of the breach point")
    s = math.sin(heading)
    if abs(s) < 1e-12:
        raise ValueError("entry heading is parallel to the road: no corner point")
    t = (ys - yb) / s
    if t < 0:
        raise ValueError("entry ray points away from the stop line")
    xi = xb + t * math.cos(heading)
    p_ip = (xi, ys)
    l_espp = math.hypot(xi - xb, ys - yb) + abs(xs - xi)
    return EsppAnchors((xb, yb), (xs, ys), p_ip, math.atan2(ys - yb, xs - xb), l_espp)


def _polyline_length(p_bp, p_sp, heading):
    """Vectorized L_ESPP for candidate arrays (no validation)."""
    xb, yb = p_bp
    xs, ys = p_sp
    t = (ys - yb) / math.sin(heading)
    xi = xb + t * math.cos(heading)
    return np.abs(t) + np.abs(xs - xi)


# ---------------------------------------------------------------- stop point


@dataclass(frozen=True)
class StopPointResult:
    point: tuple
    manhattan: float
    region: int
    constrained: bool


def stop_candidates(p_bp, d_brake: float, road: RoadGeometry, l_w: float, resolution: float):
    """Candidate grid: x from the breach over one braking distance, y across
    the stopping lane so that the footprint stays clear of both the road
    edge and the restricted strip (l_w/2 wide) along the lane's outer
    boundary."""
    xb = float(p_bp[0])
    nx = int(math.floor(d_brake / resolution + 1e-9))
    xs = xb + resolution * np.arange(nx + 1)
    if xs[-1] < xb + d_brake - 1e-9:
        # the far edge is the only place a path can be a full braking distance long
        xs = np.append(xs, xb + d_brake)
    y_hi = road.lower_edge_y - 0.5 * l_w
    y_lo = road.esl_lower_y + 0.5 * l_w + 0.5 * l_w
    if y_hi < y_lo:
        return xs, np.zeros(0)
    ny = int(math.floor((y_hi - y_lo) / resolution + 1e-9))
    ys = y_hi - resolution * np.arange(ny + 1)
    return xs, ys


def feasible_mask(X, Y, p_bp, entry_tilt: float, region: EscapeRegion, d_brake: float,
                  constrained: bool):
    if not constrained:
        return np.ones(np.shape(X), dtype=bool)
    xb, yb = p_bp
    dx = X - xb
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.arctan((Y - yb) / dx)
    ok = (dx > 0) & (ang > -entry_tilt) & (ang < 0)
    lab = region.classify(X, Y)
    length = _polyline_length(p_bp, (X, Y), -entry_tilt)
    want = np.where(length >= d_brake, 1, 4)
    return ok & (lab == want)


def _argmax_tiebreak(X, Y, D, yb):
    """Largest Manhattan distance; ties (to 1e-9) go to larger x, then to
    larger |y - y_bp|."""
    Dr = np.round(D, 9)
    order = np.lexsort((np.abs(Y - yb), X, Dr))
    return order[-1]


def select_stop_point(p_bp, entry_tilt: float, region: EscapeRegion, road: RoadGeometry,
                      d_brake: float, l_w: float, obstacle_heading: float = 0.0,
                      resolution: float = 0.25) -> StopPointResult:
    """Grid search for the stop point maximizing the Manhattan distance to
    the breach.

    ``entry_tilt`` (> 0) is the magnitude of the entry heading; it bounds the
    breach-to-stop angle. When the obstacle heads away from the stopping
    lane (``obstacle_heading > 0``) the angle and region constraints are
    dropped.
    """
    xs, ys = stop_candidates(p_bp, d_brake, road, l_w, resolution)
    if xs.size == 0 or ys.size == 0:
        raise NoFeasibleStopPoint("candidate grid is empty")
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    constrained = obstacle_heading <= 0
    ok = feasible_mask(X, Y, p_bp, entry_tilt, region, d_brake, constrained)
    if not ok.any():
        raise NoFeasibleStopPoint(
            f"no stop point satisfies the constraints (breach {p_bp}, D_brake {d_brake:.2f} m)")
    X, Y = X[ok], Y[ok]
    D = np.abs(X - p_bp[0]) + np.abs(Y - p_bp[1])
    i = _argmax_tiebreak(X, Y, D, p_bp[1])
    pt = (float(X[i]), float(Y[i]))
    return StopPointResult(pt, float(D[i]), int(region.classify(*pt)), constrained)


# ---------------------------------------------------------------- waypoints


def assemble_hybrid_waypoints(apf_points, anchors: EsppAnchors, n_b2i: int, n_i2s: int) -> np.ndarray:
    """APF points, breach, evenly spaced interior points of both construction
    segments, stop point. Raises if x is not strictly increasing."""
    apf = np.asarray(apf_points, dtype=float).reshape(-1, 2)
    bp = np.asarray(anchors.p_bp)
    ip = np.asarray(anchors.p_ip)
    sp = np.asarray(anchors.p_sp)
    t1 = np.arange(1, n_b2i + 1) / (n_b2i + 1)
    t2 = np.arange(1, n_i2s + 1) / (n_i2s + 1)
    seg1 = bp + t1[:, None] * (ip - bp)
    seg2 = ip + t2[:, None] * (sp - ip)
    pts = np.vstack([apf, bp, seg1, seg2, sp])
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise ValueError("hybrid waypoints are not strictly increasing in x")
    return pts


# ---------------------------------------------------------------- potentials


def _shifted(curve: ClothoidCoefficients, x, offset):
    slope = curve.slope(x)
    return curve.value(x) + offset * np.sqrt(1.0 + slope**2), slope


def espp_boundary_potential(x, y, curve: ClothoidCoefficients, side: str, cfg: EsppConfig):
    """Corridor wall along the fitted curve, in the curve's frame.

    The right wall is the curve shifted down by ``corridor_half_width``
    along its normal, the left wall shifted up. The value is
    A_e (1 - exp(-/+ b_w sign(y - f_b) d))^2 with d measured along the wall
    normal, so it vanishes on the wall.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if side == "right":
        fb, slope = _shifted(curve, x, -cfg.corridor_half_width)
        k = -1.0
    elif side == "left":
        fb, slope = _shifted(curve, x, cfg.corridor_half_width)
        k = 1.0
    else:
        raise ValueError("side must be 'left' or 'right'")
    flat = np.abs(slope) < 1e-6
    safe_slope = np.where(flat, 1.0, slope)
    m_y = -1.0 / safe_slope
    b_y = fb - m_y * x
    dx = np.where(flat, 0.0, (y - b_y) / m_y - x)
    dist = np.sqrt(dx**2 + (fb - y) ** 2)
    val = cfg.a_e * (1.0 - np.exp(k * cfg.b_w * np.sign(y - fb) * dist)) ** 2
    return val if val.ndim else float(val)


def espp_attractive_potential(x, y, target, xi: float):
    d2 = (np.asarray(x, dtype=float) - target[0]) ** 2 + (np.asarray(y, dtype=float) - target[1]) ** 2
    out = 0.5 * xi * d2
    return out if np.ndim(out) else float(out)


def temporary_target(curve: ClothoidCoefficients, x_ego: float, speed: float, x_stop: float,
                     cfg: EsppConfig) -> tuple:
    """Point on the curve a lookahead ahead of the ego's projection (in the
    curve frame), never past the stop point."""
    ahead = max(cfg.lookahead_min, speed * cfg.lookahead_time)
    # walk along the curve by arc length
    xs = np.linspace(x_ego, max(x_ego, x_stop), 400)
    if xs[-1] <= x_ego:
        return float(x_stop), float(curve.value(x_stop))
    ys = curve.value(xs)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xs), np.diff(ys)))])
    if s[-1] <= ahead:
        return float(x_stop), float(curve.value(x_stop))
    xt = float(np.interp(ahead, s, xs))
    return xt, float(curve.value(xt))


def espp_potential(x, y, curve, target, cfg: EsppConfig):
    return (espp_boundary_potential(x, y, curve, "right", cfg)
            + espp_boundary_potential(x, y, curve, "left", cfg)
            + espp_attractive_potential(x, y, target, cfg.xi))


def descend_espp(start, curve, target, cfg: EsppConfig, step: float, h: float = 1e-4) -> np.ndarray:
    """Up to ``p_num`` gradient steps on the corridor + attractive field,
    each accepted only if it lowers the potential (backtracking)."""
    p = np.asarray(start, dtype=float)
    out = []
    u = espp_potential(p[0], p[1], curve, target, cfg)
    for _ in range(cfg.p_num):
        gx = (espp_potential(p[0] + h, p[1], curve, target, cfg)
              - espp_potential(p[0] - h, p[1], curve, target, cfg)) / (2 * h)
        gy = (espp_potential(p[0], p[1] + h, curve, target, cfg)
              - espp_potential(p[0], p[1] - h, curve, target, cfg)) / (2 * h)
        g = math.hypot(gx, gy)
        if g < 1e-12:
            break
        t = step
        while t > 1e-9:
            q = p - t * np.array([gx, gy]) / g
            uq = espp_potential(q[0], q[1], curve, target, cfg)
            if uq < u:
                break
            t *= 0.5
        else:
            break
        p, u = q, uq
        out.append(p.copy())
    return np.array(out).reshape(-1, 2)


# ---------------------------------------------------------------- plan


@dataclass
class EsppPlan:
    curve: ClothoidCoefficients
    pose: tuple  # vehicle frame of the fit (X, Y, psi)
    anchors: EsppAnchors
    region: EscapeRegion
    stop: StopPointResult
    waypoints_world: np.ndarray
    waypoints_vehicle: np.ndarray
    weights: np.ndarray
    p_new: np.ndarray  # vehicle frame
    target: tuple  # vehicle frame
    entry_tilt: float
    fallback: bool = False

    @property
    def x_stop(self) -> float:
        return float(self.waypoints_vehicle[-1, 0])

    def lateral(self, xv):
        """Curve value in the vehicle frame, held constant beyond the stop."""
        xv = np.asarray(xv, dtype=float)
        xe = np.minimum(xv, self.x_stop)
        y = self.curve.value(xe)
        k = np.where(xv <= self.x_stop, self.curve.curvature(xe), 0.0)
        return y, k

    def world_points(self, xv) -> np.ndarray:
        y, _ = self.lateral(xv)
        return clothoid.vehicle_to_world(np.column_stack([np.asarray(xv, dtype=float), y]), self.pose)

    def sample(self, xs_world):
        """Lateral world position and curvature at world abscissae."""
        xs_world = np.asarray(xs_world, dtype=float)
        X0, Y0, psi = self.pose
        c, s = math.cos(psi), math.sin(psi)
        u = (xs_world - X0) / c
        for _ in range(3):
            y, _k = self.lateral(u)
            u = (xs_world - X0 + s * y) / c
        y, k = self.lateral(u)
        return Y0 + s * u + c * y, k


def entry_tilt_for(heading: float, cfg: EsppConfig) -> float:
    return float(np.clip(abs(heading), cfg.min_entry_heading, cfg.max_entry_heading))


def plan_espp(ego_pose, speed: float, apf_points, obstacle, road: RoadGeometry, d_brake: float,
              l_w: float, n_p: int, t_s: float, cfg: EsppConfig | None = None,
              bounds: FitBounds | None = None) -> EsppPlan:
    """Full escape plan from the trigger-time snapshot.

    ``obstacle`` is (x, y, heading, speed). ``apf_points`` are world-frame
    points of the current field path ahead of the ego; only those before the
    breach are used.
    """
    cfg = cfg or EsppConfig()
    bounds = bounds or FitBounds()
    X0, Y0, psi0 = map(float, ego_pose)
    tilt = entry_tilt_for(psi0, cfg)
    height = Y0 - road.lower_edge_y
    if height <= 0:
        p_bp = (X0, Y0)
    else:
        p_bp = (X0 + height / math.tan(tilt), road.lower_edge_y)
    ox, oy, opsi, ov = obstacle
    sector = predict_motion_sector(ox, oy, opsi, ov, n_p, t_s, cfg)
    region = build_region(p_bp, d_brake, road, sector)
    stop = select_stop_point(p_bp, tilt, region, road, d_brake, l_w, opsi, cfg.grid_resolution)
    anchors = build_anchors(p_bp, stop.point, -tilt)

    apf = np.asarray(apf_points, dtype=float).reshape(-1, 2)
    apf = apf[(apf[:, 0] > X0) & (apf[:, 0] < p_bp[0])]
    apf = np.vstack([[X0, Y0], apf])
    world = assemble_hybrid_waypoints(apf, anchors, cfg.n_b2i, cfg.n_i2s)
    vehicle = clothoid.world_to_vehicle(world, (X0, Y0, psi0))
    w = np.ones(len(world))
    w[len(apf)] = cfg.breach_weight
    w[-1] = cfg.final_weight
    stations = np.linspace(0.0, vehicle[-1, 0], 100)
    # the stop tangent follows the road (world heading 0) within e_psi
    x_end = vehicle[-1, 0]
    end = (x_end, -psi0 + bounds.e_psi_min, -psi0 + bounds.e_psi_max)
    curve = clothoid.fit_qp(vehicle, w, bounds, kappa_stations=stations, end_slope=end)
    target = temporary_target(curve, 0.0, speed, vehicle[-1, 0], cfg)
    p_new = descend_espp((0.0, 0.0), curve, target, cfg, step=max(speed * t_s, 0.05))
    return EsppPlan(curve, (X0, Y0, psi0), anchors, region, stop, world, vehicle, w, p_new,
                    target, tilt)
