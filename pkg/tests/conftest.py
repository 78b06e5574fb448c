import time

import pytest

from espp.simulator import Planner, SimConfig, run

SPEEDS = (20.0, 25.0, 30.0, 35.0)


@pytest.fixture(scope="session")
def grid():
    """Every (planner, speed) cell of the cut-in scenario, plus the wall time."""
    t0 = time.perf_counter()
    traces = {(p, v): run(SimConfig(planner=p).with_speed(v)) for p in Planner for v in SPEEDS}
    return traces, time.perf_counter() - t0


@pytest.fixture(scope="session")
def nominal(grid):
    return grid[0][(Planner.ESPP_APF, 30.0)]


ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
