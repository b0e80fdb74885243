import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def record(criterion, status, detail):
        line = f"criterion {criterion}: {status} - {detail}"
        _VERDICTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
