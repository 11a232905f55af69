"""Shared pytest wiring.

test_acceptance.py appends one result line per criterion to
`acceptance_results`; printing them from the terminal-summary hook keeps
them visible even though pytest captures per-test stdout.
"""

acceptance_results: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_results:
        terminalreporter.section("acceptance")
        for line in acceptance_results:
            terminalreporter.write_line(line)
