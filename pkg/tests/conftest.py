import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def flat_scene():
    from semheight.scenegen import generate_scene

    # no objects; roughness zero makes the surface exactly z = 0
    return generate_scene(0.512, 0.004, (0, 0, 0), rng_seed=3, background_roughness=0.0)


@pytest.fixture(scope="session")
def desk_scene():
    from semheight.scenegen import generate_scene

    return generate_scene(1.024, 0.004, (2, 3, 2), rng_seed=1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
