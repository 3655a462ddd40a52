"""Collects one verdict line per acceptance criterion and prints them after the run."""

from __future__ import annotations

VERDICTS: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
