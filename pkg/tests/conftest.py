import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bridgekit.reproduce import smoluchowski_problem, solve

settings.register_profile(
    "bridgekit", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("bridgekit")


@pytest.fixture(scope="session")
def smoluchowski():
    """Solved planar Smoluchowski bridges, cached per diffusion value."""
    cache = {}

    def get(epsilon):
        if epsilon not in cache:
            cache[epsilon] = solve(smoluchowski_problem(epsilon))
        return cache[epsilon]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """List collecting one verdict line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
