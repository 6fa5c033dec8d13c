"""Collects one verdict line per acceptance criterion and prints them after the run."""
import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and report.passed:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    verdict = "PASS" if report.passed else "FAIL"
    line = f"criterion {n:>2}: {verdict}  {detail}".rstrip()
    item.config.stash[_LINES][n] = line
    print(f"\n{line}")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
