"""Shared pytest plumbing: collect acceptance verdict lines and echo them
in the terminal summary so a plain `pytest -v` run shows one pass/fail
line per criterion."""

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
