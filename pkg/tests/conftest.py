import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpocc.mapper import OccupancyMap
from gpocc.sim import bundled_world, simulate_trajectory, trajectory_poses

settings.register_profile("gpocc", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gpocc")

# sensor setup shared by the world-scale tests (matches the CLI defaults)
N_RAYS = 360
R_MAX = 6.0
NOISE = 0.01


def run_world(name, noise=NOISE, seed=0):
    world = bundled_world(name)
    poses = trajectory_poses(world.waypoints, world.step)
    scans = list(simulate_trajectory(world, poses, N_RAYS, math.pi, R_MAX, noise, seed))
    m = OccupancyMap()
    stats = [m.ingest(sc) for sc in scans]
    return world, scans, m, stats


@pytest.fixture(scope="session")
def env_a_run():
    return run_world("env_a")


@pytest.fixture(scope="session")
def env_b_run():
    return run_world("env_b")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``report(n, ok, detail)`` records one acceptance line and fails the test when not ok."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def report(n, ok, detail):
        lines[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        assert ok, lines[n]

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
