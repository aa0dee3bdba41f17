import numpy as np
import pytest

from octattn.grid import SparseVoxelGrid
from octattn.tensor import Tensor


def random_grid(rng, m=60, d=8, scenes=1, extent=10, voxel_size=(0.05, 0.05, 0.125)):
    """Random sparse grid with unique (scene, coord) pairs, rows in random order."""
    rows = []
    seen = set()
    while len(rows) < m:
        b = int(rng.integers(scenes))
        c = tuple(int(v) for v in rng.integers(0, extent, 3))
        if (b, c) not in seen:
            seen.add((b, c))
            rows.append((b, c))
    batch = np.array([r[0] for r in rows])
    coords = np.array([r[1] for r in rows])
    return SparseVoxelGrid(
        coords,
        batch,
        Tensor(rng.normal(size=(m, d))),
        voxel_size,
        (0.0, 0.0, 0.0),
        (100.0, 100.0, 100.0),
        num_scenes=scenes,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_grid():
    return random_grid


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
