"""Acceptance reporting: every test marked ``acceptance("<criterion>")`` gets one
PASS/FAIL line in the terminal summary, with whatever detail it recorded."""

import pytest

_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): primary acceptance criterion")


@pytest.fixture
def record(request):
    """Call ``record("text")`` to attach measured numbers to the criterion line."""
    details = []
    request.node._acceptance_detail = details
    return details.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(getattr(item, "_acceptance_detail", []))
        _RESULTS[name] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _RESULTS.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
