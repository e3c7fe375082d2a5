import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_runtest_logreport(report):
    """Keep the call-phase outcome of every acceptance criterion."""
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _results[int(m.group(1))] = (status, detail)


_results: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, detail = _results[n]
        terminalreporter.write_line(f"criterion {n} {status}: {detail}")


@pytest.fixture
def detail(record_property):
    """Record the measured numbers shown next to a criterion in the summary."""
    def _set(text):
        record_property("detail", text)
    return _set
