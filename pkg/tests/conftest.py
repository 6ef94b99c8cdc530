import pytest

_criteria: list[tuple[int, str, str, float, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _criteria.append((number, title, "PASS" if report.passed else "FAIL", report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, seconds, detail in sorted(_criteria):
        terminalreporter.write_line(f"criterion {number} {verdict} {title} ({seconds:.1f} s) {detail}")
