"""Shared pytest wiring.

The acceptance tests append one verdict line per criterion to
``acceptance_lines``; echoing them from a terminal-summary hook keeps them
visible even when pytest captures test stdout.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
