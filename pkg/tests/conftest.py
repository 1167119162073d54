"""Shared fixtures: the production corridor solve is run once per session."""

import time

import pytest

from bisweep.certificate import certify
from bisweep.geometry import straight_corridor
from bisweep.solver import SolverOptions, solve_bilevel


@pytest.fixture(scope="session")
def corridor_scenario():
    return straight_corridor()


@pytest.fixture(scope="session")
def corridor_run(corridor_scenario):
    """Full-resolution continuation solve of the corridor instance.

    Wall time is recorded so runtime-budgeted checks can account for it.
    """
    t0 = time.perf_counter()
    sol = solve_bilevel(corridor_scenario,
                        opts=SolverOptions(n_intervals=40, seeds=1, screen_iters=3))
    return {"solution": sol, "wall_time": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def corridor_certificate(corridor_run, corridor_scenario):
    t0 = time.perf_counter()
    report = certify(corridor_run["solution"], corridor_scenario)
    return {"report": report, "wall_time": time.perf_counter() - t0}
