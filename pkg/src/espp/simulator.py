"""Closed-loop cut-in scenario.

An obstacle overtakes in the adjacent lane, swerves into the ego lane one
body length ahead and brakes hard. The ego runs one of four planners on top
of the same MPC:

* ``CPF-CS``: conventional field (static obstacle spread), constant speed.
* ``APF-FB``: adaptive field, full braking once the blind alley is detected.
* ``APF-noLR``: adaptive field, the lower edge term is dropped on detection
  and the controller may use the stopping lane; full braking.
* ``ESPP-APF``: adaptive field until detection, then the fitted escape
  curve is tracked into the stopping lane while braking.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import emergency_trigger as et
from . import potential_field as pf
from . import qp_core
from .clothoid import FitBounds
from .espp_planner import EsppConfig, EsppPlan, NoFeasibleStopPoint, plan_espp, predict_motion_sector
from .mpc_controller import MpcConfig, MpcController, OutputBounds, PursuitReference, build_reference
from .vehicle_model import MIN_SPEED, VehicleParams, VehicleState, step

log = logging.getLogger(__name__)

GRAVITY = 9.81
STOP_SPEED = 0.1
# below this the linear tire model is meaningless; the last command is held
CONTROL_MIN_SPEED = 1.0
TRACE_COLUMNS = ("t", "x", "y", "v", "beta", "psi", "psi_dot", "delta_f", "mode", "u_total",
                 "obs_x", "obs_y", "obs_psi", "obs_v", "cut_in", "triggered")
_FLAG_COLUMNS = ("cut_in", "triggered")


class Planner(str, enum.Enum):
    CPF_CS = "CPF-CS"
    APF_FB = "APF-FB"
    APF_NOLR = "APF-noLR"
    ESPP_APF = "ESPP-APF"

    @classmethod
    def parse(cls, name: str) -> "Planner":
        key = name.strip().lower().replace("_", "-")
        for p in cls:
            if p.value.lower() == key:
                return p
        raise ValueError(f"unknown planner {name!r}; choose from {[p.value for p in cls]}")


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, step_index: int):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario knobs. Speeds in m/s, times in s, lengths in m."""

    ego_speed: float = 30.0
    obstacle_speed_offset: float = 2.0
    obstacle_start_gap: float = -2.0
    obstacle_lane_y: float = 6.0
    obstacle_target_y: float = 1.5
    cut_in_gap: float | None = None  # defaults to one vehicle length
    cut_in_heading: float = 0.2
    cut_in_ramp: float = 0.5
    brake_delay: float = 0.2
    obstacle_decel: float = 0.75 * GRAVITY
    include_obstacle: bool = True
    duration: float = 12.0
    reaction_time: float = 0.5
    upsilon: float = 0.75
    lookahead_time: float = 1.0
    field_lookahead_time: float = 0.5
    lookahead_min: float = 5.0
    max_slope_rate: float = 0.2
    target_ahead: float = 100.0
    waypoint_count: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.ego_speed < 0 or self.ego_speed + self.obstacle_speed_offset < 0:
            raise ValueError("speeds must be nonnegative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.obstacle_decel <= 0 or self.upsilon <= 0:
            raise ValueError("decelerations must be positive")


@dataclass(frozen=True)
class SimConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    road: pf.RoadGeometry = field(default_factory=pf.RoadGeometry)
    apf: pf.ApfConfig = field(default_factory=pf.ApfConfig)
    espp: EsppConfig = field(default_factory=EsppConfig)
    fit: FitBounds = field(default_factory=FitBounds)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    planner: Planner = Planner.ESPP_APF

    @property
    def braking(self) -> et.BrakingModel:
        return et.BrakingModel.from_friction(self.scenario.upsilon, self.scenario.reaction_time)

    def with_speed(self, v: float) -> "SimConfig":
        return replace(self, scenario=replace(self.scenario, ego_speed=float(v)))


# ---------------------------------------------------------------- obstacle


@dataclass
class Obstacle:
    """Scripted kinematic vehicle: yaw ramp toward the ego lane, hold,
    counter-steer onto the target line; braking after a delay."""

    x: float
    y: float
    psi: float
    v: float
    cfg: ScenarioConfig
    phase: str = "cruise"
    t_cut: float | None = None
    psi_dot: float = 0.0
    a_long: float = 0.0

    def start_cut_in(self, t: float):
        self.phase = "in"
        self.t_cut = t

    def step(self, t: float, dt: float):
        c = self.cfg
        rate = c.cut_in_heading / c.cut_in_ramp
        self.psi_dot = 0.0
        if self.phase == "in":
            self.psi_dot = -rate
            if self.psi - rate * dt <= -c.cut_in_heading:
                self.phase = "hold"
        elif self.phase == "hold":
            remaining = self.y - c.obstacle_target_y
            # lateral travel while unwinding the heading linearly
            unwind = self.v * math.sin(abs(self.psi)) * (abs(self.psi) / rate) / 2.0
            if remaining <= unwind:
                self.phase = "out"
        if self.phase == "out":
            self.psi_dot = min(rate, -self.psi / dt)
            if self.psi + self.psi_dot * dt >= 0.0:
                self.phase = "done"
        self.a_long = 0.0
        if self.t_cut is not None and t >= self.t_cut + c.brake_delay and self.v > 0:
            self.a_long = -c.obstacle_decel
        self.x += dt * self.v * math.cos(self.psi)
        self.y += dt * self.v * math.sin(self.psi)
        self.psi += dt * self.psi_dot
        if self.phase == "in" and self.psi < -c.cut_in_heading:
            self.psi = -c.cut_in_heading
        if self.phase == "done":
            self.psi = 0.0
        self.v = max(0.0, self.v + dt * self.a_long)
        if self.v == 0.0:
            self.a_long = 0.0

    @property
    def a_lat(self) -> float:
        return self.v * self.psi_dot


# ---------------------------------------------------------------- geometry


def footprint(x: float, y: float, psi: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle centred at (x, y)."""
    c, s = math.cos(psi), math.sin(psi)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return np.column_stack([x + c * local[:, 0] - s * local[:, 1], y + s * local[:, 0] + c * local[:, 1]])


def detect_collision(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (touching counts
    as overlap)."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


# ---------------------------------------------------------------- trace


@dataclass
class TraceRecord:
    t: float
    x: float
    y: float
    v: float
    beta: float
    psi: float
    psi_dot: float
    delta_f: float
    mode: str
    u_total: float
    obs_x: float
    obs_y: float
    obs_psi: float
    obs_v: float
    cut_in: int = 0
    triggered: int = 0


@dataclass
class Metrics:
    ac: float
    rt: float
    ca: bool
    ss: bool
    max_steer: float
    max_lat_accel: float
    stop_position: tuple
    espp_fallback: bool = False

    def to_json_dict(self, planner: str, speed: float, seed: int) -> dict:
        return {
            "ac": self.ac,
            "rt_s": self.rt,
            "ca": self.ca,
            "ss": self.ss,
            "max_steer_rad": self.max_steer,
            "max_lat_accel_mps2": self.max_lat_accel,
            "stop_x_m": self.stop_position[0],
            "stop_y_m": self.stop_position[1],
            "planner": planner,
            "speed_mps": speed,
            "seed": seed,
            "espp_fallback": self.espp_fallback,
        }


@dataclass
class SimulationTrace:
    records: list
    t_s: float
    cut_in_time: float | None = None
    trigger_time: float | None = None
    collision: bool = False
    collision_time: float | None = None
    plan: EsppPlan | None = None
    fallback: bool = False
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    road: pf.RoadGeometry = field(default_factory=pf.RoadGeometry)
    planner: str = Planner.ESPP_APF.value
    speed: float = 30.0
    seed: int = 0
    metrics: Metrics | None = None
    mpc_softened: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_trace_csv(text: str, **kwargs) -> SimulationTrace:
    """Parse a trace written by ``SimulationTrace.to_csv``.

    Events are rebuilt from the rows: cut-in and trigger times from the flag
    columns, the collision by re-running the footprint test, the escape
    fallback from the mode column. ``kwargs`` go to ``SimulationTrace``
    (road, vehicle, planner, speed, seed).
    """
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("trace has no rows")
    missing = [c for c in TRACE_COLUMNS[:10] if c not in rows[0]]
    if missing:
        raise ValueError(f"trace is missing columns {missing}")
    recs = []
    for r in rows:
        vals = {}
        for c in TRACE_COLUMNS:
            raw = r.get(c)
            if c == "mode":
                vals[c] = raw
            elif c in _FLAG_COLUMNS:
                vals[c] = int(raw or 0)
            else:
                vals[c] = float(raw) if raw not in (None, "") else math.nan
        recs.append(TraceRecord(**vals))
    t_s = recs[1].t - recs[0].t if len(recs) > 1 else 0.01
    trace = SimulationTrace(recs, t_s, **kwargs)
    trace.cut_in_time = next((r.t for r in recs if r.cut_in), None)
    trace.trigger_time = next((r.t for r in recs if r.triggered), None)
    trace.fallback = any(r.mode == "fallback" for r in recs)
    p = trace.vehicle
    for r in recs:
        if math.isfinite(r.obs_x) and detect_collision(
                footprint(r.x, r.y, r.psi, p.length, p.l_w),
                footprint(r.obs_x, r.obs_y, r.obs_psi, p.length, p.l_w)):
            trace.collision = True
            trace.collision_time = r.t
            break
    trace.metrics = compute_metrics(trace)
    return trace


# ---------------------------------------------------------------- run


def _obstacle_params(obs: Obstacle, cfg: SimConfig, adaptive: bool) -> pf.ObstaclePfParams:
    return pf.ObstaclePfParams.from_motion(obs.x, obs.y, obs.v, obs.a_long, obs.a_lat, cfg.apf,
                                           adaptive=adaptive)


@dataclass(frozen=True)
class _ValleyPath:
    ctx: pf.FieldContext
    y_near: float
    y_lo: float
    y_hi: float

    def sample(self, xs):
        xs = np.asarray(xs, dtype=float)
        y = np.array([pf.lateral_valley(x, self.y_near, self.ctx, self.y_lo, self.y_hi) for x in xs])
        return y, np.zeros_like(y)


@dataclass(frozen=True)
class _LookaheadValley:
    """Valley sampled only at the pursuit lookahead (the one station the
    pursuit reference needs); other stations get a zero curvature."""

    ctx: pf.FieldContext
    y_near: float
    y_lo: float
    y_hi: float

    def sample(self, xs):
        xs = np.asarray(xs, dtype=float)
        if xs.size == 1:
            y = pf.lateral_valley(float(xs[0]), self.y_near, self.ctx, self.y_lo, self.y_hi)
            return np.array([y]), np.zeros(1)
        return np.full_like(xs, self.y_near), np.zeros_like(xs)


def initial_valley(cfg: SimConfig) -> float:
    """Equilibrium of the obstacle-free field in the ego lane."""
    road = cfg.road
    ctx = pf.FieldContext(road, cfg.apf, (), pf.TargetPoint(cfg.scenario.target_ahead, road.lane_centers[0]))
    return pf.lateral_valley(0.0, road.lane_centers[0], ctx, road.lower_edge_y + 0.05,
                             road.lane_divider_ys[0] if road.lane_divider_ys else road.upper_edge_y)


def run(cfg: SimConfig) -> SimulationTrace:
    sc = cfg.scenario
    road = cfg.road
    dt = cfg.mpc.t_s
    planner = cfg.planner
    params = cfg.vehicle
    brake_model = cfg.braking
    lane_y = road.lane_centers[0]
    y0 = initial_valley(cfg)
    ego = VehicleState(0.0, y0, 0.0, 0.0, 0.0, sc.ego_speed)
    obs = None
    if sc.include_obstacle:
        obs = Obstacle(sc.obstacle_start_gap, sc.obstacle_lane_y, 0.0,
                       sc.ego_speed + sc.obstacle_speed_offset, sc)
    cut_gap = params.length if sc.cut_in_gap is None else sc.cut_in_gap
    controller = MpcController(params, cfg.mpc)
    latch = et.TriggerLatch()
    adaptive = planner is not Planner.CPF_CS
    trace = SimulationTrace([], dt, vehicle=params, road=road, planner=planner.value,
                            speed=sc.ego_speed, seed=sc.seed)
    plan: EsppPlan | None = None
    brake_start = None
    n_steps = int(round(sc.duration / dt))
    mode = "normal"
    prev_slope = None
    for k in range(n_steps + 1):
        t = k * dt
        if obs is not None and obs.phase == "cruise" and obs.x - ego.x >= cut_gap:
            obs.start_cut_in(t)
            trace.cut_in_time = t
        obstacles = (_obstacle_params(obs, cfg, adaptive),) if obs is not None else ()
        target = pf.TargetPoint(ego.x + sc.target_ahead, lane_y)
        lower_edge = not (latch.active and planner is Planner.APF_NOLR)
        ctx = pf.FieldContext(road, cfg.apf, obstacles, target, pf.Mode.NORMAL, lower_edge)

        grad = pf.descend_gradient(ego.x, ego.y, ctx)
        if isinstance(grad, pf.GradientResult) and ego.v > MIN_SPEED:
            chain = et.generate_waypoints(ego.x, ego.y, grad.psi_ref, max(ego.v * dt, 1e-3),
                                          sc.waypoint_count)
            decision = et.evaluate_trigger(chain, ego.x, ego.y, grad.psi_ref, ego.v, road, brake_model)
        else:
            decision = None
        if planner is not Planner.CPF_CS and decision is not None and latch.update(decision):
            trace.trigger_time = t
            brake_start = t + sc.reaction_time
            log.info("blind alley at t=%.2f s (D_E2R %.2f m, D_brake %.2f m)", t, decision.d_e2r,
                     decision.d_brake)
            if planner is Planner.ESPP_APF:
                plan = _plan(cfg, ego, obs, ctx, decision.d_brake, trace)

        emergency = latch.active and planner in (Planner.ESPP_APF, Planner.APF_NOLR) and not trace.fallback
        y_lo = road.esl_lower_y if emergency else road.lower_edge_y
        if plan is not None and not trace.fallback:
            path = plan
            mode = "espp"
        else:
            path = _LookaheadValley(ctx, ego.y, y_lo + (0.0 if not lower_edge else 0.05),
                                    road.upper_edge_y - 0.05)
            mode = "normal"
            if latch.active:
                mode = "fallback" if trace.fallback else "emergency"
        # only the pre-planned escape curve gets a ramped entry; field planners
        # follow the instantaneous field
        slew = sc.max_slope_rate * dt if mode == "espp" else None
        ahead = sc.lookahead_time if mode == "espp" else sc.field_lookahead_time
        ref_path = PursuitReference(path, ego, ahead, sc.lookahead_min, prev_slope, slew)
        prev_slope = ref_path.slope
        reference = build_reference(ref_path, ego, cfg.mpc.n_p, dt)
        bounds = OutputBounds.for_road(road.lower_edge_y, road.upper_edge_y, road.esl_lower_y,
                                       cfg.mpc, emergency=emergency)
        if ego.v > CONTROL_MIN_SPEED:
            try:
                delta, diag = controller.control(ego, reference, bounds)
            except (qp_core.QpError, np.linalg.LinAlgError, ValueError) as exc:
                raise NumericalFailure(str(exc), k) from exc
            trace.mpc_softened += int(diag.softened)
        else:
            delta = controller.u_prev

        u_here = float(pf.total_potential(ego.x, ego.y, ctx))
        if obs is None:
            ox = oy = opsi = ov = math.nan
        else:
            ox, oy, opsi, ov = obs.x, obs.y, obs.psi, obs.v
        rec = TraceRecord(t, ego.x, ego.y, ego.v, ego.beta, ego.psi, ego.psi_dot, delta, mode,
                          u_here, ox, oy, opsi, ov, int(trace.cut_in_time is not None),
                          int(latch.active))
        if not all(math.isfinite(v) for v in (ego.x, ego.y, ego.v, ego.psi, delta, u_here)):
            raise NumericalFailure("non-finite state or command", k)
        trace.records.append(rec)

        if obs is not None and detect_collision(
                footprint(ego.x, ego.y, ego.psi, params.length, params.l_w),
                footprint(obs.x, obs.y, obs.psi, params.length, params.l_w)):
            trace.collision = True
            trace.collision_time = t
            break
        if brake_start is not None and t > brake_start and ego.v < STOP_SPEED:
            break
        if k == n_steps:
            break

        decel = None
        if planner is not Planner.CPF_CS and brake_start is not None and t >= brake_start - 1e-12:
            decel = brake_model.max_decel
        ego = step(ego, delta, params, dt, braking=decel)
        if obs is not None:
            obs.step(t, dt)
    trace.plan = plan
    trace.metrics = compute_metrics(trace)
    return trace


def _plan(cfg: SimConfig, ego: VehicleState, obs: Obstacle | None, ctx, d_brake: float,
          trace: SimulationTrace) -> EsppPlan | None:
    sc = cfg.scenario
    road = cfg.road
    # field path ahead of the ego: valley at the prediction stations
    ld = max(sc.lookahead_min, ego.v * sc.lookahead_time)
    stations = ego.x + np.linspace(ld / 10, ld, 10)
    valley = _ValleyPath(ctx, ego.y, road.lower_edge_y + 0.05, road.upper_edge_y - 0.05)
    ys, _ = valley.sample(stations)
    apf_pts = np.column_stack([stations, ys])
    o = (obs.x, obs.y, obs.psi, obs.v) if obs is not None else (ego.x + 1e3, road.upper_edge_y, 0.0, 0.0)
    try:
        return plan_espp((ego.x, ego.y, ego.psi), ego.v, apf_pts, o, road, d_brake, cfg.vehicle.l_w,
                         cfg.mpc.n_p, cfg.mpc.t_s, cfg.espp, cfg.fit)
    except NoFeasibleStopPoint as exc:
        log.warning("escape plan unavailable, braking in lane: %s", exc)
        trace.fallback = True
        return None


# ---------------------------------------------------------------- metrics


def path_curvature(x, y, stride: int = 5, min_spacing: float = 1e-3) -> np.ndarray:
    """Three-point curvature of the polyline subsampled every ``stride``
    samples; segments shorter than ``min_spacing`` (a stopped vehicle) are
    merged away first."""
    x = np.asarray(x, dtype=float)[::stride]
    y = np.asarray(y, dtype=float)[::stride]
    keep = [0]
    for i in range(1, len(x)):
        if math.hypot(x[i] - x[keep[-1]], y[i] - y[keep[-1]]) >= min_spacing:
            keep.append(i)
    x, y = x[keep], y[keep]
    if len(x) < 3:
        return np.zeros(0)
    ax, ay = x[1:-1] - x[:-2], y[1:-1] - y[:-2]
    bx, by = x[2:] - x[1:-1], y[2:] - y[1:-1]
    cx, cy = x[2:] - x[:-2], y[2:] - y[:-2]
    cross = ax * by - ay * bx
    denom = np.hypot(ax, ay) * np.hypot(bx, by) * np.hypot(cx, cy)
    return 2.0 * cross / denom


def stopped_safely(trace: SimulationTrace) -> bool:
    if trace.collision or not trace.records:
        return False
    last = trace.records[-1]
    if last.v >= STOP_SPEED:
        return False
    road = trace.road
    p = trace.vehicle
    ego_fp = footprint(last.x, last.y, last.psi, p.length, p.l_w)
    in_esl = (ego_fp[:, 1].max() <= road.lower_edge_y) and (ego_fp[:, 1].min() >= road.esl_lower_y)
    if not in_esl:
        return False
    if math.isfinite(last.obs_x):
        obs_fp = footprint(last.obs_x, last.obs_y, last.obs_psi, p.length, p.l_w)
        if detect_collision(ego_fp, obs_fp):
            return False
    return True


def compute_metrics(trace: SimulationTrace) -> Metrics:
    x = trace.column("x")
    y = trace.column("y")
    v = trace.column("v")
    t = trace.column("t")
    kappa = path_curvature(x, y)
    ac = float(np.mean(np.abs(kappa))) if kappa.size else 0.0
    t0 = trace.cut_in_time if trace.cut_in_time is not None else 0.0
    stopped = np.nonzero((v < STOP_SPEED) & (t >= t0))[0]
    t_end = t[stopped[0]] if stopped.size else t[-1]
    rt = float(max(0.0, t_end - t0))
    delta = trace.column("delta_f")
    psi_dot = trace.column("psi_dot")
    last = trace.records[-1]
    return Metrics(
        ac=ac,
        rt=rt,
        ca=not trace.collision,
        ss=stopped_safely(trace),
        max_steer=float(np.max(np.abs(delta))),
        max_lat_accel=float(np.max(np.abs(v * psi_dot))),
        stop_position=(float(last.x), float(last.y)),
        espp_fallback=trace.fallback,
    )


def sector_at_stop(trace: SimulationTrace, cfg: SimConfig):
    """Obstacle motion sector evaluated at the final sample."""
    last = trace.records[-1]
    return predict_motion_sector(last.obs_x, last.obs_y, last.obs_psi, last.obs_v, cfg.mpc.n_p,
                                 cfg.mpc.t_s, cfg.espp)


def metrics_json(trace: SimulationTrace) -> str:
    m = trace.metrics or compute_metrics(trace)
    return json.dumps(m.to_json_dict(trace.planner, trace.speed, trace.seed), indent=2, sort_keys=False)
