from __future__ import annotations

import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Store the one-line verdict of an acceptance criterion."""

    def _record(number: int, passed: bool, text: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {text}"
        _ACCEPTANCE[number] = line
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
