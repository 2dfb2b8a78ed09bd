import numpy as np
import pytest

from rapvision.grid import SourceImage, partition
from rapvision.providers import generate_suite

# Lines printed by the acceptance module, repeated at the end of every run so
# they are visible without -s.
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


def noise_image(width, height, seed=0) -> SourceImage:
    rng = np.random.default_rng(seed)
    return SourceImage(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


@pytest.fixture
def grid_4x4():
    return partition(noise_image(64, 64, seed=3), 16)


@pytest.fixture(scope="session")
def small_suite():
    return generate_suite(20, 8, 8, seed=5)
