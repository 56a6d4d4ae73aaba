"""Shared pytest hooks: one summary line per acceptance criterion."""

import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Call with a short string describing the measured values."""

    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed
    if report.when == "call" or failed:
        notes = "; ".join(v for k, v in item.user_properties if k == "detail")
        prev_ok = _RESULTS.get(n, (True, ""))[0]
        _RESULTS[n] = (prev_ok and not failed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, notes = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({notes})" if notes else ""))
