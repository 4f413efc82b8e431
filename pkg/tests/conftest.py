import pytest

_criteria: list[str] = []


@pytest.fixture(scope="session")
def criteria_log():
    return _criteria


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
