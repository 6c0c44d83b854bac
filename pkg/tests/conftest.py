import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(Path(__file__).resolve().parent))

FIXTURES = ROOT / "fixtures"
DEFAULT_CONFIG = ROOT / "configs" / "default.json"

ACCEPTANCE_LINES = []


@pytest.fixture
def school_choice():
    from vasim.dfd import load_diagram

    return load_diagram(FIXTURES / "school_choice.json")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
