from __future__ import annotations

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[criterion] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(_LINES):
            terminalreporter.write_line(_LINES[criterion])
