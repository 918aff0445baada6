import pytest

_SUMMARY_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_SUMMARY_KEY] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    detail = getattr(item.module, "DETAILS", {}).get(number, "")
    item.config.stash[_SUMMARY_KEY][number] = (title, outcome, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash[_SUMMARY_KEY]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        title, outcome, detail = rows[number]
        line = f"criterion {number:2d} [PRIMARY] {title}: {outcome}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
