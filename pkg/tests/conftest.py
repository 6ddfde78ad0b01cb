import numpy as np
import pytest

from augpt.imageops import Raster


def random_raster(rng, width=16, height=16):
    return Raster(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def img(rng):
    return random_raster(rng)


# Acceptance criteria report: one PASS/FAIL line per criterion, printed as the
# test runs and repeated in the terminal summary so it survives output capture.
ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
