import numpy as np
import pytest

from intensity_slam import synth
from intensity_slam.geometry import Se3Pose


def random_pose(rng, max_angle=np.pi * 0.95, max_t=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Se3Pose.exp(np.concatenate([axis * angle, rng.uniform(-max_t, max_t, 3)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corridor_pair():
    """Two noiseless corridor scans 0.2 m apart plus their true poses."""
    world, poses = synth.scenario("corridor", 2, 0.2)
    sensor = synth.SensorModel().noiseless()
    scans = [synth.render_scan(world, sensor, p, seed=k, timestamp=0.1 * k) for k, p in enumerate(poses)]
    return scans, poses


@pytest.fixture(scope="session")
def loop_small():
    """World and poses of a 100-scan loop at 0.2 m steps (nothing rendered yet)."""
    return synth.scenario("loop", 100, 0.2)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE:
        terminalreporter.write_line(line)
