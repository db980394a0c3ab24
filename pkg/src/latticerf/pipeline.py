"""Stage glue shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .generate import Generator
from .identify import AxisFit, IdentifiedModel, identify_cells
from .numerics import KernelParams
from .qoi import ElasticitySetup, LevelSpec, evaluate_qoi
from .voxelgrid import UnitCellLayout, VoxelGrid, extract_cells

MODEL_FILE = "model.json"
THRESHOLD_FILE = "threshold.npy"
MEAN_FILE = "mean_field.npy"


def identify_volume(grid: VoxelGrid, cell_dims, n_lags, mode: str = "matern") -> tuple[IdentifiedModel, UnitCellLayout]:
    layout = UnitCellLayout(tuple(cell_dims), grid.dims)
    cells = extract_cells(grid, layout)
    return identify_cells(cells, n_lags, mode), layout


@dataclass
class StoredModel:
    """What ``generate`` and ``uq`` need: thresholds, kernel and source geometry."""

    cell_dims: tuple[int, int, int]
    grid_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    kernel: KernelParams
    threshold: np.ndarray
    fits: list[AxisFit]

    def generator(self, seed: int, grid_dims=None) -> Generator:
        layout = UnitCellLayout(self.cell_dims, tuple(grid_dims or self.grid_dims))
        return Generator(self.kernel, self.threshold, layout, seed, self.spacing)


def save_model(out_dir, model: IdentifiedModel, layout: UnitCellLayout, spacing) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / THRESHOLD_FILE, model.threshold.values)
    np.save(out_dir / MEAN_FILE, model.mean.values)
    record = {
        "cell_dims": list(layout.cell_dims),
        "grid_dims": list(layout.grid_dims),
        "spacing": list(spacing),
        "kernel": model.kernel().to_dict(),
        "fits": [model.fits[a].to_dict() for a in sorted(model.fits)],
        "threshold_file": THRESHOLD_FILE,
        "mean_file": MEAN_FILE,
    }
    (out_dir / MODEL_FILE).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_model(model_dir) -> StoredModel:
    model_dir = Path(model_dir)
    path = model_dir / MODEL_FILE
    if not path.exists():
        raise FileNotFoundError(f"no fit records at {path}; run 'identify' first")
    rec = json.loads(path.read_text())
    return StoredModel(
        tuple(rec["cell_dims"]),
        tuple(rec["grid_dims"]),
        tuple(rec["spacing"]),
        KernelParams.from_dict(rec["kernel"]),
        np.load(model_dir / rec["threshold_file"]),
        [AxisFit.from_dict(f) for f in rec["fits"]],
    )


class RealizationModel:
    """MLMC level model: QoI of generated realizations at grid-coarsening levels.

    Level ``n_levels - 1`` evaluates the full-resolution realization; each
    lower level halves the resolution. The two members of an MLMC pair call
    :meth:`evaluate` with the same index and therefore see the same volume.
    """

    def __init__(self, generator: Generator, kind: str, n_levels: int, setup: ElasticitySetup | None = None,
                 cache_size: int = 4):
        self.generator = generator
        self.kind = kind
        self.n_levels = int(n_levels)
        self.setup = setup
        self.fine_dims = generator.layout.grid_dims
        f = 2 ** (self.n_levels - 1)
        if any(n > 1 and n % f for n in self.fine_dims):
            raise ValueError(f"grid {self.fine_dims} cannot be coarsened {self.n_levels - 1} times")
        self._cache: OrderedDict[int, VoxelGrid] = OrderedDict()
        self._cache_size = cache_size

    def level(self, level: int) -> LevelSpec:
        return LevelSpec(level, self.n_levels, self.fine_dims)

    def dofs(self, level: int) -> int:
        return self.level(level).dofs

    def realization(self, index: int) -> VoxelGrid:
        grid = self._cache.get(index)
        if grid is None:
            grid = self.generator(index)
            self._cache[index] = grid
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return grid

    def evaluate(self, index: int, level: int) -> tuple[float, float]:
        return evaluate_qoi(self.realization(index), self.setup, self.level(level), self.kind)


def square_lattice(counts=(10, 10, 1), cell: int = 40, strut: float = 6.5, depth: int = 1,
                   width_jitter: float = 0.6, roughness: float = 1.2, corr: float = 1.5, seed: int = 0) -> VoxelGrid:
    """Synthetic segmented scan of a square grid lattice.

    Struts run along x and y on the cell borders. Every strut segment gets its
    own width offset, and the strut surfaces are perturbed by smoothed noise,
    so the pooled cells show a band of intermediate probabilities around each
    strut. ``depth`` sets ``n_z`` (1 for a 2D slice).
    """
    rng = np.random.default_rng(seed)
    nx, ny = counts[0] * cell, counts[1] * cell
    x = np.arange(nx) + 0.5
    y = np.arange(ny) + 0.5
    # distance to the nearest strut centerline (cell borders)
    dx = np.abs((x + cell / 2) % cell - cell / 2)
    dy = np.abs((y + cell / 2) % cell - cell / 2)
    # per-segment width offsets
    wy = rng.normal(0.0, width_jitter, size=(counts[0] + 1, counts[1]))
    wx = rng.normal(0.0, width_jitter, size=(counts[0], counts[1] + 1))
    iy_strut = np.rint(x / cell).astype(int)  # vertical strut index for each x
    jx_strut = np.rint(y / cell).astype(int)
    cell_x = np.minimum((x // cell).astype(int), counts[0] - 1)
    cell_y = np.minimum((y // cell).astype(int), counts[1] - 1)

    out = np.zeros((nx, ny, depth), dtype=np.uint8)
    for k in range(depth):
        noise = ndimage.gaussian_filter(rng.standard_normal((nx, ny)), corr, mode="wrap")
        noise *= roughness / noise.std()
        half_v = strut / 2 + wy[np.minimum(iy_strut, counts[0])[:, None], cell_y[None, :]]
        half_h = strut / 2 + wx[cell_x[:, None], np.minimum(jx_strut, counts[1])[None, :]]
        vert = dx[:, None] < half_v + noise
        horz = dy[None, :] < half_h + noise
        out[:, :, k] = vert | horz
    return VoxelGrid(out)
