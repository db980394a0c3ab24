"""Binary voxel volumes, raw+sidecar I/O and periodic unit-cell tiling.

Arrays are indexed ``[x, y, z]``. On disk the linear ordering is x-fastest,
which is numpy's Fortran order for that indexing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kvtext

ORDER = "x-fastest"
ENCODING = "u8-binary"


class VolumeFormatError(ValueError):
    """Raised for malformed sidecars or raw payloads."""


class LayoutError(ValueError):
    """Raised when a unit-cell layout does not tile the parent volume."""


def _triple(values, name, kind=int) -> tuple:
    vals = tuple(kind(v) for v in values)
    if len(vals) != 3:
        raise ValueError(f"{name} must have 3 entries, got {len(vals)}")
    return vals


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable binary volume (1 = material, 0 = void).

    ``data`` has shape ``dims``; a 2D slice is stored with ``n_z = 1``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("voxel values must be exactly 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.size and arr.max() > 1:
            raise ValueError("voxel values must be exactly 0 or 1")
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.flags.writeable = False
        spacing = _triple(self.spacing, "spacing", float)
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def linear(self) -> np.ndarray:
        """Voxel values in x-fastest linear order."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class UnitCellLayout:
    cell_dims: tuple[int, int, int]
    grid_dims: tuple[int, int, int]
    counts: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        cell = _triple(self.cell_dims, "cell_dims")
        grid = _triple(self.grid_dims, "grid_dims")
        if min(cell) < 1 or min(grid) < 1:
            raise LayoutError(f"dimensions must be positive: cell={cell}, grid={grid}")
        if any(g % c for g, c in zip(grid, cell)):
            raise LayoutError(f"cell dims {cell} do not divide grid dims {grid}")
        object.__setattr__(self, "cell_dims", cell)
        object.__setattr__(self, "grid_dims", grid)
        object.__setattr__(self, "counts", tuple(g // c for g, c in zip(grid, cell)))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    def cell_origin(self, k: int) -> tuple[int, int, int]:
        """Global voxel index of local ``(0, 0, 0)`` in cell ``k`` (x-fastest cell order)."""
        cx, cy, cz = np.unravel_index(k, self.counts, order="F")
        return (int(cx) * self.cell_dims[0], int(cy) * self.cell_dims[1], int(cz) * self.cell_dims[2])


def load_volume(meta_path, raw_path) -> VoxelGrid:
    meta_path, raw_path = Path(meta_path), Path(raw_path)
    try:
        meta = kvtext.loads(meta_path.read_text(encoding="utf-8"))
    except kvtext.KVSyntaxError as exc:
        raise VolumeFormatError(f"{meta_path}: {exc}") from None
    try:
        dims = _triple(meta["dims"], "dims")
        spacing = _triple(meta.get("spacing", [1.0, 1.0, 1.0]), "spacing", float)
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{meta_path}: malformed metadata ({exc})") from None
    if min(dims) < 1:
        raise VolumeFormatError(f"{meta_path}: non-positive dims {dims}")
    if meta.get("order", ORDER) != ORDER:
        raise VolumeFormatError(f"{meta_path}: unsupported order {meta.get('order')!r}")
    if meta.get("encoding", ENCODING) != ENCODING:
        raise VolumeFormatError(f"{meta_path}: unsupported encoding {meta.get('encoding')!r}")

    raw = np.fromfile(raw_path, dtype=np.uint8)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: size mismatch, dims {dims} need {expected} bytes, file has {raw.size}"
        )
    bad = np.flatnonzero(raw > 1)
    if bad.size:
        off = int(bad[0])
        raise VolumeFormatError(f"{raw_path}: non-binary byte {int(raw[off])} at offset {off}")
    try:
        return VoxelGrid(raw.reshape(dims, order="F"), spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{meta_path}: {exc}") from None


def save_volume(grid: VoxelGrid, meta_path, raw_path) -> None:
    meta = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "order": ORDER,
        "encoding": ENCODING,
    }
    Path(meta_path).write_text(kvtext.dumps(meta), encoding="utf-8")
    Path(raw_path).write_bytes(grid.linear().tobytes())


def _cell_view(arr: np.ndarray, layout: UnitCellLayout) -> np.ndarray:
    # (nx, ny, nz) -> (cx, kx, cy, ky, cz, kz) -> (kx, ky, kz, cx, cy, cz)
    cx, cy, cz = layout.cell_dims
    kx, ky, kz = layout.counts
    blocks = arr.reshape(kx, cx, ky, cy, kz, cz)
    return blocks.transpose(0, 2, 4, 1, 3, 5)


def extract_cells(grid: VoxelGrid, layout: UnitCellLayout) -> np.ndarray:
    """Stack of local cells, shape ``(N_cells, c_x, c_y, c_z)``.

    Cells are ordered x-fastest over cell indices, matching
    :meth:`UnitCellLayout.cell_origin`.
    """
    if tuple(grid.dims) != layout.grid_dims:
        raise LayoutError(f"layout built for {layout.grid_dims}, grid has {grid.dims}")
    view = _cell_view(grid.data, layout)
    # x-fastest over (kx, ky, kz) means kz is the slowest axis
    cells = view.transpose(2, 1, 0, 3, 4, 5).reshape(layout.n_cells, *layout.cell_dims)
    return np.ascontiguousarray(cells)


def assemble_cells(cells: np.ndarray, layout: UnitCellLayout, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    """Inverse of :func:`extract_cells`."""
    cells = np.asarray(cells)
    if cells.shape != (layout.n_cells, *layout.cell_dims):
        raise LayoutError(f"expected cells of shape {(layout.n_cells, *layout.cell_dims)}, got {cells.shape}")
    kx, ky, kz = layout.counts
    cx, cy, cz = layout.cell_dims
    view = cells.reshape(kz, ky, kx, cx, cy, cz).transpose(2, 3, 1, 4, 0, 5)
    return VoxelGrid(view.reshape(layout.grid_dims), spacing)


def tile_to_global(cell_field: np.ndarray, layout: UnitCellLayout) -> np.ndarray:
    """Repeat a per-cell field periodically over the parent grid."""
    cell_field = np.asarray(cell_field)
    if cell_field.ndim == 2:
        cell_field = cell_field[:, :, None]
    if cell_field.shape != layout.cell_dims:
        raise LayoutError(f"cell field shape {cell_field.shape} != cell dims {layout.cell_dims}")
    return np.tile(cell_field, layout.counts)


def porosity(grid: VoxelGrid) -> float:
    """Void (value 0) fraction."""
    return 1.0 - float(np.count_nonzero(grid.data)) / grid.size


def volume_stats(grid: VoxelGrid) -> dict:
    return {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "voxels": grid.size,
        "material_voxels": int(np.count_nonzero(grid.data)),
        "porosity": porosity(grid),
    }


def make_layout(grid_dims: Sequence[int], cell_dims: Sequence[int]) -> UnitCellLayout:
    return UnitCellLayout(tuple(cell_dims), tuple(grid_dims))
