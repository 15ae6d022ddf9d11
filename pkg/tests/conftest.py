"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _RESULTS[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)


@pytest.fixture
def report(request):
    """Attach a measurement to the acceptance summary line of the running test."""
    def add(text: str):
        request.node.user_properties.append(("detail", text))
    return add
