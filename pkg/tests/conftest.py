import pytest

acceptance_lines = []


@pytest.fixture(scope="session")
def criteria_report():
    """Shared sink for one verdict line per acceptance criterion."""
    return acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
