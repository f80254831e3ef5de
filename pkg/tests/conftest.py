"""Shared pytest plumbing: collects acceptance verdict lines and echoes
them in one block at the end of the run, so the criterion-by-criterion
outcome is readable without scrolling through captured output."""

_ACCEPTANCE_LINES: list = []


def record_verdict(order: int, line: str) -> None:
    _ACCEPTANCE_LINES.append((order, line))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
