"""Shared pytest hooks: acceptance criteria report lines.

Acceptance tests record one line per criterion through ``criterion_line``;
the lines are printed in the terminal summary so a plain ``pytest -v`` run
shows every criterion's measured value and pass/fail verdict even though
test stdout is captured.
"""

_CRITERION_LINES = {}


def criterion_line(number, passed, detail):
    """Record the outcome of one acceptance criterion."""
    verdict = "PASS" if passed else "FAIL"
    _CRITERION_LINES[number] = f"criterion {number:2d}: {verdict}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERION_LINES):
        terminalreporter.write_line(_CRITERION_LINES[number])
