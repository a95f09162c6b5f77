"""Collects the one-line verdicts printed by the acceptance module."""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
