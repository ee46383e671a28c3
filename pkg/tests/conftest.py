import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record ``(number, passed, detail)`` for the acceptance summary."""
    table = request.config.stash[_KEY]

    def record(number, passed, detail):
        table[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[_KEY]
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
