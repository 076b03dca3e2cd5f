import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from netmig.choice import build_choice_sets
from netmig.simulate import DgpConfig, simulate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_configure(config):
    np.seterr(all="ignore")


@pytest.fixture(scope="session")
def small_config():
    return DgpConfig(n_cities=12, n_states=3, n_agents=400, n_years=4, seed=7)


@pytest.fixture(scope="session")
def small_data(small_config):
    return simulate(small_config, n_survey=300)


@pytest.fixture(scope="session")
def small_choices(small_data):
    d = small_data
    return build_choice_sets(d.agents, d.networks, d.world, n_extra=4, seed=7)


@pytest.fixture(scope="session")
def desk_data():
    """Moderate desk-scale bundle shared by the slower integration tests."""
    return simulate(DgpConfig(n_cities=20, n_states=4, n_agents=2000, n_years=4, seed=11), n_survey=0)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
