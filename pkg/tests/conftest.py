"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): tags a test as an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    _results.setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, outcomes = _results[number]
        status = "FAIL" if "failed" in outcomes else "SKIP" if "skipped" in outcomes else "PASS"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
