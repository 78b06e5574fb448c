"""SVG figures of a simulation trace.

Rendered with matplotlib's Agg canvas. Every artist the tests look for
carries a ``gid`` which matplotlib writes out as the SVG element id, so the
structure of a figure can be checked without parsing pixels.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import potential_field as pf  # noqa: E402
from .simulator import SimConfig, SimulationTrace  # noqa: E402

PLOT_KINDS = ("trajectory", "steering", "heading", "lat_accel", "potential_heatmap")

plt.rcParams["svg.hashsalt"] = "espp"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _time_series(trace: SimulationTrace, values, ylabel: str, gid: str, ylim=None):
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(trace.column("t"), values, lw=1.2, gid=gid)
    if trace.trigger_time is not None:
        ax.axvline(trace.trigger_time, color="0.5", ls="--", lw=0.8, gid="trigger_time")
    ax.set_xlabel("t [s]")
    ax.set_ylabel(ylabel)
    if ylim is not None:
        ax.set_ylim(*ylim)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig, ax


def trajectory_figure(trace: SimulationTrace):
    road = trace.road
    x = trace.column("x")
    fig, ax = plt.subplots(figsize=(9, 3.2))
    x0, x1 = float(np.nanmin(x)) - 5.0, float(np.nanmax(x)) + 15.0
    ax.axhspan(road.lower_edge_y, road.upper_edge_y, color="0.85", gid="road_band")
    ax.axhspan(road.esl_lower_y, road.lower_edge_y, color="#f5c27a", alpha=0.6, gid="esl_band")
    for i, yc in enumerate(road.lane_divider_ys):
        ax.plot([x0, x1], [yc, yc], color="white", ls="--", lw=1.0, gid=f"divider_{i}")
    ax.plot(x, trace.column("y"), color="tab:red", lw=1.5, label=f"ego ({trace.planner})",
            gid="ego_path")
    ox = trace.column("obs_x")
    if np.isfinite(ox).any():
        ax.plot(ox, trace.column("obs_y"), color="tab:blue", lw=1.5, label="obstacle",
                gid="obstacle_path")
    if trace.plan is not None:
        pts = trace.plan.world_points(np.linspace(0.0, trace.plan.x_stop, 100))
        ax.plot(pts[:, 0], pts[:, 1], color="tab:cyan", ls=":", lw=1.2, label="escape curve",
                gid="espp_curve")
        sx, sy = trace.plan.stop.point
        ax.plot([sx], [sy], marker="*", color="purple", ms=10, ls="none", gid="stop_point")
    ax.set_xlim(x0, x1)
    ax.set_xlabel("X [m]")
    ax.set_ylabel("Y [m]")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return fig


def steering_figure(trace: SimulationTrace, u_max: float = 0.2):
    lim = 1.1 * max(u_max, float(np.max(np.abs(trace.column("delta_f")))))
    fig, ax = _time_series(trace, trace.column("delta_f"), r"$\delta_f$ [rad]", "steering",
                           ylim=(-lim, lim))
    for sgn, gid in ((1, "u_max"), (-1, "u_min")):
        ax.axhline(sgn * u_max, color="k", lw=0.6, ls=":", gid=gid)
    return fig


def heading_figure(trace: SimulationTrace):
    return _time_series(trace, trace.column("psi"), r"$\psi$ [rad]", "heading")[0]


def lat_accel_figure(trace: SimulationTrace):
    a = trace.column("v") * trace.column("psi_dot")
    return _time_series(trace, a, r"$a_y \approx V\dot\psi$ [m/s$^2$]", "lat_accel")[0]


def _row_index(trace: SimulationTrace, index: int | None) -> int:
    if index is not None:
        return int(index)
    if trace.trigger_time is not None:
        return int(np.argmin(np.abs(trace.column("t") - trace.trigger_time)))
    return len(trace.records) - 1


def field_context_at(trace: SimulationTrace, cfg: SimConfig, index: int | None = None) -> pf.FieldContext:
    """Normal-mode field as seen by the ego at one trace row (the trigger
    row by default). Obstacle accelerations are recovered by differencing
    the recorded obstacle speed and heading."""
    recs = trace.records
    index = _row_index(trace, index)
    r = recs[index]
    obstacles = ()
    if math.isfinite(r.obs_x):
        j = max(index - 1, 0)
        dt = (r.t - recs[j].t) or trace.t_s
        a_long = (r.obs_v - recs[j].obs_v) / dt
        a_lat = r.obs_v * (r.obs_psi - recs[j].obs_psi) / dt
        adaptive = trace.planner != "CPF-CS"
        obstacles = (pf.ObstaclePfParams.from_motion(r.obs_x, r.obs_y, r.obs_v, a_long, a_lat,
                                                     cfg.apf, adaptive=adaptive),)
    target = pf.TargetPoint(r.x + cfg.scenario.target_ahead, cfg.road.lane_centers[0])
    return pf.FieldContext(cfg.road, cfg.apf, obstacles, target)


def heatmap_grid(trace: SimulationTrace, cfg: SimConfig, index: int | None = None,
                 nx: int = 160, ny: int = 60):
    """Cell centres and field values of the heatmap window around the ego."""
    index = _row_index(trace, index)
    ctx = field_context_at(trace, cfg, index)
    r = trace.records[index]
    road = cfg.road
    xe = np.linspace(r.x - 20.0, r.x + 60.0, nx + 1)
    ye = np.linspace(road.lower_edge_y, road.upper_edge_y, ny + 1)
    xc = 0.5 * (xe[1:] + xe[:-1])
    yc = 0.5 * (ye[1:] + ye[:-1])
    X, Y = np.meshgrid(xc, yc)
    U = pf.total_potential(X, Y, ctx)
    return xe, ye, xc, yc, U


def potential_heatmap_figure(trace: SimulationTrace, cfg: SimConfig, index: int | None = None):
    xe, ye, _, _, U = heatmap_grid(trace, cfg, index)
    fig, ax = plt.subplots(figsize=(9, 3.2))
    # log scale: the edge term dwarfs everything near the boundary
    mesh = ax.pcolormesh(xe, ye, np.log10(U + 1e-3), shading="flat", cmap="viridis",
                         gid="potential_mesh")
    fig.colorbar(mesh, ax=ax, label=r"$\log_{10} U$")
    ax.set_xlabel("X [m]")
    ax.set_ylabel("Y [m]")
    fig.tight_layout()
    return fig


def make_figure(kind: str, trace: SimulationTrace, cfg: SimConfig):
    """Unsaved figure of one kind; the caller owns it."""
    if kind == "trajectory":
        return trajectory_figure(trace)
    if kind == "steering":
        return steering_figure(trace, cfg.mpc.u_max)
    if kind == "heading":
        return heading_figure(trace)
    if kind == "lat_accel":
        return lat_accel_figure(trace)
    if kind == "potential_heatmap":
        return potential_heatmap_figure(trace, cfg)
    raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")


def render(kind: str, trace: SimulationTrace, cfg: SimConfig, path: Path) -> Path:
    return _save(make_figure(kind, trace, cfg), path)
