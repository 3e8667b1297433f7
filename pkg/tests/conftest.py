import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


class AcceptanceRecorder:
    def __init__(self):
        self.lines = {}

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        self.lines[number] = line
        print(line)
        return ok


def pytest_configure(config):
    config._acceptance = AcceptanceRecorder()


@pytest.fixture
def criterion(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config._acceptance.lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
