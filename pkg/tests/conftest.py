import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

_ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def acceptance_record():
    """``record(n, ok, detail)`` stores one summary line per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[n])
