"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

RESULTS: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    RESULTS[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[k])
