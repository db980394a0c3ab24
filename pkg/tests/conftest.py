import numpy as np
import pytest

from latticerf.numerics import KernelParams
from latticerf.voxelgrid import VoxelGrid, save_volume


def smooth_threshold(cell_dims, amp=0.5, offset=-0.2):
    """Hand-made periodic threshold field on one cell."""
    nx, ny, nz = cell_dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return amp * np.cos(2 * np.pi * x / nx) * np.cos(2 * np.pi * y / ny) + offset + 0.0 * z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def kernel_2d():
    return KernelParams((3.0, 2.0, 1.0), (1.5, 0.5, 0.5))


@pytest.fixture
def write_volume(tmp_path):
    def _write(data, name="vol", spacing=(1.0, 1.0, 1.0)):
        grid = VoxelGrid(np.asarray(data, dtype=np.uint8), spacing)
        meta, raw = tmp_path / f"{name}.txt", tmp_path / f"{name}.raw"
        save_volume(grid, meta, raw)
        return meta, raw

    return _write


def generated_cells_1d(n, length, nu, thresholds, n_cells, seed):
    """Independent 1D cells ``(n_cells, n, 1, 1)`` from the generator's own factors and streams."""
    from latticerf.generate import CholeskySamplerState, standard_normals

    state = CholeskySamplerState.build((n, 1, 1), KernelParams((length, 1.0, 1.0), (nu, 0.5, 0.5)), seed)
    z = standard_normals(seed, 0, (n, n_cells, 1))[:, :, 0]
    u = state.factors[0] @ z
    return (u.T >= np.asarray(thresholds)[None, :]).astype(np.uint8)[:, :, None, None]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
