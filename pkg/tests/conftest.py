import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ukt.operators import Geometry, ImageGrid, build_projector  # noqa: E402


@pytest.fixture(scope="session")
def small_fan():
    grid = ImageGrid(16, 16, 1.0)
    geo = Geometry("fan", 12, 32, 1.5, d_source_axis=40.0, d_axis_detector=40.0)
    return build_projector(grid, geo)


@pytest.fixture(scope="session")
def small_parallel():
    grid = ImageGrid(16, 16, 1.0)
    geo = Geometry("parallel", 12, 24, 1.0)
    return build_projector(grid, geo)


@pytest.fixture(scope="session")
def tiny_fan():
    grid = ImageGrid(8, 8, 1.0)
    geo = Geometry("fan", 10, 16, 1.5, d_source_axis=20.0, d_axis_detector=20.0)
    return build_projector(grid, geo)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE_LINES

    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
