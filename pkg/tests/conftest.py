import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvp import tensor as T
from mvp.camera import synth_scene
from mvp.config import desk_profile, micro_profile
from mvp.model import MVPModel

settings.register_profile("mvp", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mvp")


@pytest.fixture(autouse=True)
def _f64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def micro_model():
    return MVPModel(micro_profile(), seed=0)


@pytest.fixture(scope="session")
def desk_model():
    return MVPModel(desk_profile(), seed=0)


@pytest.fixture(scope="session")
def desk_scene():
    return synth_scene(0, 4, 64, 64, 24)


@pytest.fixture(scope="session")
def micro_scene():
    return synth_scene(0, 2, 16, 16, 6)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
