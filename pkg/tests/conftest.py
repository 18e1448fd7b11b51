CRITERION_LINES = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    CRITERION_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERION_LINES):
        terminalreporter.write_line(CRITERION_LINES[number])
