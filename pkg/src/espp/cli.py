"""Command-line front end: ``run``, ``sweep`` and ``plot``.

Exit codes: 0 clean run, 1 collision, 2 configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import potential_field as pf
from .clothoid import FitBounds
from .espp_planner import EsppConfig
from .mpc_controller import MpcConfig
from .simulator import (NumericalFailure, Planner, ScenarioConfig, SimConfig, SimulationTrace,
                        metrics_json, read_trace_csv, run)
from .vehicle_model import VehicleParams

log = logging.getLogger("espp")

EXIT_OK, EXIT_COLLISION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SPEEDS = (20.0, 25.0, 30.0, 35.0)
SWEEP_COLUMNS = ("planner", "speed_mps", "ac", "rt_s", "ca", "ss", "max_steer_rad",
                 "max_lat_accel_mps2", "stop_x_m", "stop_y_m", "status")

SECTIONS = {
    "scenario": ScenarioConfig,
    "road": pf.RoadGeometry,
    "apf": pf.ApfConfig,
    "espp": EsppConfig,
    "fit": FitBounds,
    "vehicle": VehicleParams,
    "mpc": MpcConfig,
}

# table symbols accepted next to the field names
ALIASES = {
    "apf": {"A_lane": "a_lane", "A_obs": "a_obs", "w_1": "w1"},
    "espp": {"A_e": "a_e", "delta_psi_o_max": "delta_psi_o_max", "Delta_psi_o_max": "delta_psi_o_max"},
    "vehicle": {"I_z": "i_z", "C_f": "c_f", "C_r": "c_r"},
    "mpc": {"N_p": "n_p", "N_c": "n_c", "T_s": "t_s", "Q": "q", "R": "r", "lambda": "lam",
            "delta_f_max": "u_max", "delta_delta_f_max": "du_max"},
    "fit": {"R_min": "r_min", "omega": "omega_max"},
    "road": {"Y_l": "lower_edge_y", "Y_u": "upper_edge_y", "Y_c": "lane_divider_ys",
             "Y_esl": "esl_lower_y"},
    "scenario": {},
}


class ConfigError(ValueError):
    pass


def _normalize(section: str, key: str, value):
    cls = SECTIONS[section]
    name = ALIASES[section].get(key, key)
    names = {f.name for f in dataclasses.fields(cls)}
    if section == "fit" and name == "e_y":
        lo, hi = _pair(value, key)
        return {"e_y_min": lo, "e_y_max": hi}
    if section == "fit" and name == "e_psi":
        lo, hi = _pair(value, key)
        return {"e_psi_min": lo, "e_psi_max": hi}
    if name not in names:
        raise ConfigError(f"{section}.{key}: unknown field (known: {sorted(names)})")
    if name == "lane_divider_ys" and not isinstance(value, (list, tuple)):
        value = (value,)
    if isinstance(value, list):
        value = tuple(value)
    return {name: value}


def _pair(value, key):
    if isinstance(value, (int, float)):
        return -abs(value), abs(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return float(value[0]), float(value[1])
    raise ConfigError(f"fit.{key}: expected a number or a [min, max] pair")


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is read as JSON when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, raw = text.split("=", 1)
    section, key = lhs.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"override {text!r}: unknown section {section!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def build_config(path: str | None = None, overrides=(), planner: str | None = None,
                 speed: float | None = None, seed: int | None = None) -> SimConfig:
    """Defaults, then the JSON file, then command-line values."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        for section, body in doc.items():
            if section == "planner":
                planner = planner or body
                continue
            if section not in SECTIONS or not isinstance(body, dict):
                raise ConfigError(f"{p}: unknown or malformed section {section!r}")
            for k, v in body.items():
                values[section].update(_normalize(section, k, v))
    for text in overrides:
        section, k, v = parse_override(text)
        values[section].update(_normalize(section, k, v))
    if speed is not None:
        values["scenario"]["ego_speed"] = float(speed)
    if seed is not None:
        values["scenario"]["seed"] = int(seed)
    try:
        built = {s: SECTIONS[s](**values[s]) for s in SECTIONS}
        chosen = Planner.parse(planner) if planner else Planner.ESPP_APF
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return SimConfig(planner=chosen, **built)


def _setup_logging():
    level = os.environ.get("ESPP_LOG_LEVEL", "warn").lower()
    table = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
             "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(table.get(level, logging.WARNING))
    if level not in table:
        log.warning("ESPP_LOG_LEVEL=%r not recognised, using warn", level)


def write_outputs(trace: SimulationTrace, cfg: SimConfig, out: Path, plots: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace.to_csv())
    (out / "metrics.json").write_text(metrics_json(trace) + "\n")
    if plots:
        from . import plotting

        for kind in plotting.PLOT_KINDS:
            plotting.render(kind, trace, cfg, out / f"{kind}.svg")


def cmd_run(args) -> int:
    cfg = build_config(args.config, args.set, args.planner, args.speed, args.seed)
    try:
        trace = run(cfg)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out)
    write_outputs(trace, cfg, out, args.plots)
    print(metrics_json(trace))
    if trace.collision:
        print(f"collision at t={trace.collision_time:.2f} s", file=sys.stderr)
        return EXIT_COLLISION
    return EXIT_OK


def _sweep_cell(job):
    cfg, speed = job
    cell = cfg.with_speed(speed)
    try:
        trace = run(cell)
    except NumericalFailure as exc:
        return {"planner": cell.planner.value, "speed_mps": speed, "status": f"numerical failure: {exc}"}
    row = trace.metrics.to_json_dict(cell.planner.value, speed, cell.scenario.seed)
    row["status"] = "fallback" if trace.fallback else "ok"
    return row


def sweep(cfg: SimConfig, speeds, planners=None, jobs: int = 1) -> list[dict]:
    """Every (planner, speed) cell; rows in planner-major order."""
    planners = list(planners or Planner)
    if not speeds:
        raise ConfigError("speed list is empty")
    cells = [(dataclasses.replace(cfg, planner=p), float(v)) for p in planners for v in speeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def sweep_csv(rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in SWEEP_COLUMNS})
    return buf.getvalue()


def cmd_sweep(args) -> int:
    cfg = build_config(args.config, args.set, None, None, args.seed)
    speeds = args.speeds or list(DEFAULT_SPEEDS)
    planners = [Planner.parse(args.planner)] if args.planner else None
    rows = sweep(cfg, speeds, planners, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    failed = [r for r in rows if str(r.get("status", "")).startswith("numerical")]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_plot(args) -> int:
    from . import plotting

    if args.kind not in plotting.PLOT_KINDS:
        print(f"unknown plot kind {args.kind!r}; choose from {plotting.PLOT_KINDS}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = build_config(args.config, args.set, args.planner, None, None)
    path = Path(args.trace)
    if not path.is_file():
        raise ConfigError(f"trace file not found: {path}")
    try:
        trace = read_trace_csv(path.read_text(), road=cfg.road, vehicle=cfg.vehicle,
                               planner=cfg.planner.value)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    target = Path(args.out) / f"{args.kind}.svg"
    plotting.render(args.kind, trace, cfg, target)
    print(target)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="espp", description="Emergency stopping path planner simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config with sections " + ", ".join(SECTIONS))
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config field (repeatable)")
        p.add_argument("--out", metavar="DIR", default="out", help="output directory")

    r = sub.add_parser("run", help="simulate one scenario")
    common(r)
    r.add_argument("--planner", help="CPF-CS, APF-FB, APF-noLR or ESPP-APF (default ESPP-APF)")
    r.add_argument("--speed", type=float, metavar="M_S", help="ego speed")
    r.add_argument("--seed", type=int, metavar="N")
    r.add_argument("--plots", action="store_true", help="also write SVG figures")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="all planners over a list of speeds")
    common(s)
    s.add_argument("--speeds", type=float, nargs="+", metavar="M_S",
                   help="speeds (default 20 25 30 35)")
    s.add_argument("--planner", help="restrict to one planner")
    s.add_argument("--seed", type=int, metavar="N")
    s.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel workers")
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render one SVG figure from a trace CSV")
    common(p)
    p.add_argument("trace", metavar="TRACE_CSV")
    p.add_argument("--kind", required=True,
                   help="trajectory, steering, heading, lat_accel or potential_heatmap")
    p.add_argument("--planner", help="planner that produced the trace")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
