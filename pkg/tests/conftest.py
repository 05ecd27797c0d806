"""Shared pytest hooks: a one-line verdict per acceptance criterion at the end of the run."""

ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = ("PASS" if passed else "FAIL", detail)


def record_skip(number, reason):
    ACCEPTANCE_RESULTS[number] = ("SKIP", reason)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        verdict, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
