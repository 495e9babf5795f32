import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segjpeg.codec import RateBudget  # noqa: E402
from segjpeg.frame import default_palette  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def palette():
    return default_palette()


@pytest.fixture
def budget():
    return RateBudget.from_kbit(500, 10)


@pytest.fixture
def data_dir():
    return DATA


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
