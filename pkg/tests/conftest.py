import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deepmatch.synthetic import SyntheticSpec, generate_pair, texture

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def textured64():
    return texture((64, 64), "noise", np.random.default_rng(11))


@pytest.fixture(scope="session")
def textured128():
    return texture((128, 128), "noise", np.random.default_rng(1))


@pytest.fixture(scope="session")
def shifted_pair():
    return generate_pair(SyntheticSpec(shape=(64, 64), params=(3, -2), seed=5, max_displacement=8))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
