import csv
import io
import json
import logging

import pytest

from espp import cli
from espp import simulator as sim


def test_run_espp_clean(tmp_path, capsys):
    code = cli.main(["run", "--out", str(tmp_path), "--speed", "30"])
    assert code == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["ca"] is True and m["ss"] is True and m["planner"] == "ESPP-APF"
    assert (tmp_path / "trace.csv").read_text().startswith(",".join(sim.TRACE_COLUMNS))
    assert json.loads(capsys.readouterr().out) == m


def test_run_cpf_collides(tmp_path):
    assert cli.main(["run", "--planner", "CPF-CS", "--out", str(tmp_path)]) == 1
    assert json.loads((tmp_path / "metrics.json").read_text())["ca"] is False


def test_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["run", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("args", [
    ["run", "--planner", "bogus"],
    ["run", "--set", "mpc.N_p"],
    ["run", "--set", "mpc.nonsense=3"],
    ["run", "--set", "mpc.n_c=50"],
    ["frobnicate"],
])
def test_configuration_errors(args, tmp_path, capsys):
    assert cli.main(args + ["--out", str(tmp_path)] if args[0] == "run" else args) == 2


def test_bad_field_named_in_message(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"apf": {"A_obz": 1}}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "apf.A_obz" in capsys.readouterr().err


def test_numerical_failure_exit(monkeypatch, tmp_path, capsys):
    def boom(cfg):
        raise sim.NumericalFailure("forced", 17)

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", "--out", str(tmp_path)]) == 3
    assert "step 17" in capsys.readouterr().err


def test_precedence_per_field(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "apf": {"A_lane": 30, "eta": 4.0},
        "mpc": {"N_p": 25, "lambda": 0.3},
        "vehicle": {"C_f": 70000},
        "scenario": {"ego_speed": 25.0},
        "fit": {"e_y": 0.5, "R_min": 7.0},
    }))
    c = cli.build_config(str(cfg), ["apf.eta=5.0", "mpc.lam=0.5"], speed=None)
    assert c.apf.a_lane == 30          # file over default
    assert c.apf.eta == 5.0            # override over file
    assert c.apf.a_obs == 150.0        # default kept
    assert c.mpc.n_p == 25 and c.mpc.lam == 0.5
    assert c.vehicle.c_f == 70000 and c.vehicle.c_r == 66900.0
    assert c.scenario.ego_speed == 25.0
    assert (c.fit.e_y_min, c.fit.e_y_max, c.fit.r_min) == (-0.5, 0.5, 7.0)
    assert cli.build_config(str(cfg), ["scenario.ego_speed=20"], speed=35.0).scenario.ego_speed == 35.0
    assert cli.build_config(None).mpc == sim.MpcConfig()


def test_sweep_small(tmp_path, capsys):
    code = cli.main(["sweep", "--speeds", "20", "35", "--planner", "APF-FB", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [(r["planner"], float(r["speed_mps"])) for r in rows] == [("APF-FB", 20.0), ("APF-FB", 35.0)]
    assert all(r["ca"] == "False" for r in rows)


def test_sweep_records_failures_and_continues(monkeypatch):
    real = cli.run

    def flaky(cfg):
        if cfg.scenario.ego_speed == 25.0:
            raise sim.NumericalFailure("forced", 3)
        return real(cfg)

    monkeypatch.setattr(cli, "run", flaky)
    rows = cli.sweep(sim.SimConfig(), [20.0, 25.0], [sim.Planner.CPF_CS])
    assert len(rows) == 2
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("numerical failure")
    with pytest.raises(cli.ConfigError):
        cli.sweep(sim.SimConfig(), [])


def test_sweep_parallel_matches_serial():
    cfg = sim.SimConfig(scenario=sim.ScenarioConfig(duration=2.0))
    serial = cli.sweep(cfg, [20.0, 30.0], [sim.Planner.CPF_CS])
    parallel = cli.sweep(cfg, [20.0, 30.0], [sim.Planner.CPF_CS], jobs=2)
    assert serial == parallel


def test_plot_from_trace(tmp_path):
    assert cli.main(["run", "--planner", "APF-FB", "--speed", "20", "--out", str(tmp_path)]) == 1
    trace = tmp_path / "trace.csv"
    assert cli.main(["plot", str(trace), "--kind", "trajectory", "--planner", "APF-FB",
                     "--out", str(tmp_path)]) == 0
    assert 'id="ego_path"' in (tmp_path / "trajectory.svg").read_text()
    assert cli.main(["plot", str(trace), "--kind", "pie", "--out", str(tmp_path)]) == 2
    assert cli.main(["plot", str(tmp_path / "none.csv"), "--kind", "heading", "--out", str(tmp_path)]) == 2


def test_run_with_plots(tmp_path):
    assert cli.main(["run", "--plots", "--speed", "20", "--out", str(tmp_path)]) == 0
    for kind in ("trajectory", "steering", "heading", "lat_accel", "potential_heatmap"):
        assert (tmp_path / f"{kind}.svg").is_file()


@pytest.mark.parametrize("name,level", [("error", logging.ERROR), ("warn", logging.WARNING),
                                        ("info", logging.INFO), ("debug", logging.DEBUG)])
def test_log_level_env(monkeypatch, name, level):
    monkeypatch.setenv("ESPP_LOG_LEVEL", name)
    cli._setup_logging()
    assert logging.getLogger("espp").level == level
