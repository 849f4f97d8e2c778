import numpy as np
import pytest
from hypothesis import settings

from sint.datagen import generate_sequence
from sint.siamese import DEFAULT_ARCH, build_model

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return build_model(DEFAULT_ARCH, seed=0)


@pytest.fixture(scope="session")
def sequence():
    return generate_sequence(11, length=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    import acceptance_log

    n = marker.args[0]
    if report.when == "setup" and not report.failed:
        return
    acceptance_log.OUTCOMES[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.OUTCOMES):
        detail = acceptance_log.DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d}: {acceptance_log.OUTCOMES[n]}  {detail}")
