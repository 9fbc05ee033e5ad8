import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

from stereoxct.geometry import GridSpec, default_rig  # noqa: E402


@pytest.fixture(scope="session")
def desk_grid():
    return GridSpec.centered(128)


@pytest.fixture(scope="session")
def desk_rig(desk_grid):
    return default_rig(desk_grid)


@pytest.fixture(scope="session")
def tri_rig(desk_grid):
    return default_rig(desk_grid, n_views=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [v for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
