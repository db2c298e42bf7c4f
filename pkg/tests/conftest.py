"""Collects the acceptance verdict lines and prints them after the run."""
import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one criterion line and fails the
    test when ``ok`` is false; ``ok=None`` records a skip."""
    lines = request.config.stash[_LINES_KEY]

    def record(number, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"{status} criterion {number}: {detail}"
        lines.append((number, line))
        print(line)
        if ok is None:
            pytest.skip(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
