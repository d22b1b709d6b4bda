"""Collects the acceptance verdicts and prints them at the end of the run."""

VERDICTS: dict = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    VERDICTS[number] = (title, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
