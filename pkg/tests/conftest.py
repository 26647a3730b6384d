"""Collects ``@pytest.mark.criterion(n, title)`` outcomes into one PASS/FAIL line each."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    r = _RESULTS.setdefault(number, {"title": title, "failed": False, "passed": 0})
    r["failed"] = r["failed"] or report.failed
    if report.when == "call" and report.passed:
        r["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        verdict = "FAIL" if r["failed"] else "PASS" if r["passed"] else "SKIP"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {r['title']}")
