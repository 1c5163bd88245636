import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twophase.population import FinitePopulation

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def two_cluster_pop():
    """One stratum, cluster sizes (1, 3), cluster totals (2, 3)."""
    return FinitePopulation.from_cluster_totals([[2.0, 3.0]], sizes=[[1, 3]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
