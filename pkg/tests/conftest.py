import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.failed:
        number, title = marker
        entry = _STORE.setdefault(number, {"titles": [], "failed": []})
        if title not in entry["titles"]:
            entry["titles"].append(title)
        if not report.passed:
            entry["failed"].append(report.nodeid.split("::")[-1])


_STORE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _STORE:
        return
    terminalreporter.section("acceptance criteria")
    for number, entry in sorted(_STORE.items()):
        status = "FAIL" if entry["failed"] else "PASS"
        line = f"criterion {number:2d} {status}  {'; '.join(entry['titles'])}"
        if entry["failed"]:
            line += f"  [failed: {', '.join(entry['failed'])}]"
        terminalreporter.write_line(line)
