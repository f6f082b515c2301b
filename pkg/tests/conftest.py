import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Collects one summary line per acceptance criterion."""

    def record(line):
        _ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
