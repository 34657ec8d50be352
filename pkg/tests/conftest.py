import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; echoed in the terminal summary."""

    def record(number, passed: bool, detail: str, seconds: float, budget: float | None):
        verdict = "PASS" if passed else "FAIL"
        line = f"ACCEPTANCE {number}: {verdict}  {detail}  [{seconds:.1f} s" + (f" / budget {budget:g} s]" if budget else "]")
        print(line)
        _LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: s.split(":")[0].split()[1]):
            terminalreporter.write_line(line)
