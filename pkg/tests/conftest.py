ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion verdict lines after the test run, so
    they are visible even when output capture is on."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
