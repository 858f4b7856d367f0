import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_runtest_logreport(report):
    # several tests may decide one criterion; any failure makes it FAIL
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    prev = _criteria.get(n, (title, "PASS"))[1]
    if report.failed or prev == "FAIL":
        verdict = "FAIL"
    elif report.skipped:
        verdict = "SKIP"
    else:
        verdict = prev
    _criteria[n] = (title, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {title}")
