import numpy as np
import pytest
from hypothesis import settings

from hierplace.grid import CellIndex, GridSpec, Level, build_vocabulary

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_cells(rng, n, extent=160, level="125m"):
    cells = set()
    while len(cells) < n:
        cells.add(CellIndex(level, int(rng.integers(0, extent)), int(rng.integers(0, extent))))
    return cells


@pytest.fixture
def spec():
    return GridSpec()


@pytest.fixture
def small_vocab(spec):
    rng = np.random.default_rng(7)
    return build_vocabulary(random_cells(rng, 60), spec)


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
