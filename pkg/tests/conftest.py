import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """``with criterion(n, title): ...`` records a PASS/FAIL line for the summary."""

    @contextlib.contextmanager
    def record(number, title):
        try:
            yield
        except BaseException as exc:
            line = f"criterion {number} {title}: FAIL ({type(exc).__name__})"
            _ACCEPTANCE.append(line)
            print(line)
            raise
        line = f"criterion {number} {title}: PASS"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip("ab"))):
            terminalreporter.write_line(line)
