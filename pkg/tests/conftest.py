import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("df2m", max_examples=30, deadline=None)
settings.load_profile("df2m")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------ acceptance report

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Callable ``record(number, passed, detail)`` for the acceptance suite."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    return record


def pytest_runtest_logreport(report):
    # A criterion that errors before recording still gets a FAIL line.
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" and name.startswith("test_criterion_") and report.failed:
        number = int(name.split("_")[2])
        _ACCEPTANCE.setdefault(number, (False, "error: " + report.longreprtext.splitlines()[-1]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
