from helpers import ACCEPTANCE_LINES, five_trip_table, five_trips, grid3  # noqa: F401  (fixtures)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
