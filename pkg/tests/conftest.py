import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from srp.geometry import CameraIntrinsics
from srp.models import builtin_registry
from srp.scene import default_camera

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def registry():
    return builtin_registry()


@pytest.fixture(scope="session")
def cam():
    return CameraIntrinsics.default()


@pytest.fixture(scope="session")
def extrinsic():
    return default_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
