import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from perklab import autodiff as ad

settings.register_profile(
    "perklab", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("perklab")


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
