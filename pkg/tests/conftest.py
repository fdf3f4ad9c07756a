import pytest

TITLES = {}
OUTCOMES = {}
NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    TITLES[number] = title
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        OUTCOMES.setdefault(number, []).append(not failed)


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line in the terminal summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        NOTES.setdefault(marker.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(TITLES):
        results = OUTCOMES.get(number, [])
        status = "PASS" if results and all(results) else "FAIL"
        detail = "; ".join(NOTES.get(number, []))
        line = f"criterion {number} [{status}] {TITLES[number]}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
