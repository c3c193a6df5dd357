"""Collects one verdict line per acceptance criterion and prints them at the end."""

ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(passed), detail)
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" -- {detail}" if detail else "")
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" -- {detail}" if detail else ""))
