"""Collects the acceptance suite's PASS/FAIL lines for the terminal summary."""

import pytest

_LINES: dict = {}


@pytest.fixture
def report(request):
    """Call ``report(ok, detail)`` once per criterion test."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0] if marker else request.node.name

    def _report(ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _LINES[number] = line
        print(line)
        return ok

    return _report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call" and rep.failed and marker.args[0] not in _LINES:
        _LINES[marker.args[0]] = f"criterion {marker.args[0]}: FAIL  (error: {call.excinfo.typename})"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_LINES, key=str):
            terminalreporter.write_line(_LINES[key])
