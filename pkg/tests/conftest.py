"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)
    print(_line(number, title, passed, detail))


def _line(number: int, title: str, passed: bool, detail: str) -> str:
    return f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(_line(number, *ACCEPTANCE[number]))
