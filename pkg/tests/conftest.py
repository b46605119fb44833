import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from obstraj.optimizer import random_spline
from obstraj.rigid_body import AugmentedState, ExtrinsicParams, KinematicInput, VehicleState, quat_exp

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_state(rng: np.random.Generator, bias_scale: float = 0.05) -> AugmentedState:
    vs = VehicleState(
        rng.normal(size=3),
        quat_exp(rng.normal(size=3)),
        rng.normal(size=3),
        bias_scale * rng.normal(size=3),
        bias_scale * rng.normal(size=3),
    )
    ex = ExtrinsicParams(0.1 * rng.normal(size=3), quat_exp(0.3 * rng.normal(size=3)))
    return AugmentedState(vs, ex)


def random_input(rng: np.random.Generator) -> KinematicInput:
    return KinematicInput(rng.normal(size=3), rng.normal(size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def excited_spline():
    return random_spline(np.zeros(4), 0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for name in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[name])
