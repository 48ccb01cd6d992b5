"""Collects ``@pytest.mark.criterion(n, title)`` outcomes into one summary line each."""
import pytest

_RESULTS: dict[int, list] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, [title, True])
    entry[1] = entry[1] and rep.passed


@pytest.fixture
def note(request):
    """``note(text)`` attaches a measured value to the test's criterion line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        if mark is not None:
            _NOTES.setdefault(mark.args[0], []).append(text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok = _RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if _NOTES.get(n):
            line += "  [" + "; ".join(_NOTES[n]) + "]"
        terminalreporter.write_line(line)
