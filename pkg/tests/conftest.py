import pytest
from hypothesis import HealthCheck, settings

from instances import make_drop

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_drop():
    return make_drop(3)


def pytest_terminal_summary(terminalreporter):
    from verdicts import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
