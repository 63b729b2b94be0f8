import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cord.graph import generate_grid_world, generate_random_graph
from cord.lie import Pose, exp_se3

settings.register_profile("cord", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cord")


def random_poses(rng, n, rot=1.0, trans=2.0) -> Pose:
    x = np.concatenate([rng.normal(scale=rot, size=(n, 3)), rng.normal(scale=trans, size=(n, 3))], 1)
    return exp_se3(x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_random():
    return generate_random_graph(n_poses=12, n_loops=6, n_robots=3, seed=3)


@pytest.fixture(scope="session")
def small_grid():
    # 4 robots x 27 poses
    return generate_grid_world(robots=4, side=3, seed=7)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
