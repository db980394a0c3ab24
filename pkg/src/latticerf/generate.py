"""Separable Gaussian field sampling and level cuts into binary volumes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .numerics import KernelParams, matern_rho
from .voxelgrid import LayoutError, UnitCellLayout, VoxelGrid, porosity, save_volume, tile_to_global

NUGGETS = (1e-12, 1e-10, 1e-8, 1e-6)


class CholeskyError(np.linalg.LinAlgError):
    pass


def build_corr_matrix_1d(n: int, length: float, nu: float) -> np.ndarray:
    """Toeplitz Matern correlation matrix on ``n`` unit-spaced points."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    col = np.atleast_1d(matern_rho(np.arange(n, dtype=float), length, nu))
    return linalg.toeplitz(col)


def cholesky_with_nugget(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating a diagonal nugget until it succeeds.

    Returns ``(L, nugget)``; ``L @ L.T`` reproduces ``matrix + nugget * I``.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-14):
        raise ValueError("matrix is not symmetric")
    eye = np.eye(matrix.shape[0])
    for nugget in (0.0, *NUGGETS):
        try:
            lower = linalg.cholesky(matrix + nugget * eye, lower=True, check_finite=True)
        except linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0):
            return lower, nugget
    raise CholeskyError(f"Cholesky failed even with nugget {NUGGETS[-1]:g}")


def mode_n_multiply(a: np.ndarray, b: np.ndarray, mode: int) -> np.ndarray:
    """Contract matrix ``a`` with 3D array ``b`` along index ``mode`` (1, 2 or 3)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim != 3 or mode not in (1, 2, 3):
        raise ValueError("need a 3D array and mode in {1, 2, 3}")
    if a.ndim != 2 or a.shape[1] != b.shape[mode - 1]:
        raise ValueError(f"matrix shape {a.shape} incompatible with array shape {b.shape} along mode {mode}")
    if mode == 1:
        # c_jpq = sum_k a_jk b_kpq
        return (a @ b.reshape(b.shape[0], -1)).reshape(a.shape[0], *b.shape[1:])
    if mode == 2:
        # c_pjq = sum_k a_jk b_pkq
        return np.matmul(a, b)
    # c_pqj = sum_k a_jk b_pqk
    return b @ a.T


def standard_normals(base_seed: int, index: int, shape) -> np.ndarray:
    """i.i.d. N(0, 1) draws from a Philox stream keyed by ``(base_seed, index)``.

    The draw for a given key does not depend on which other keys were used
    or in what order.
    """
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    rng = np.random.Generator(np.random.Philox(ss))
    # x-fastest fill so the flat draw order matches the on-disk voxel order
    return rng.standard_normal(int(np.prod(shape))).reshape(shape, order="F")


@dataclass(frozen=True, eq=False)
class CholeskySamplerState:
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]
    nuggets: tuple[float, float, float]
    base_seed: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def nugget(self) -> float:
        return max(self.nuggets)

    @classmethod
    def build(cls, dims, params: KernelParams, base_seed: int = 0) -> "CholeskySamplerState":
        factors, nuggets = [], []
        for a, n in enumerate(dims):
            lower, nugget = cholesky_with_nugget(build_corr_matrix_1d(int(n), *params.axis(a)))
            lower.flags.writeable = False
            factors.append(lower)
            nuggets.append(nugget)
        return cls(tuple(factors), tuple(nuggets), int(base_seed))


def correlate(state: CholeskySamplerState, z: np.ndarray) -> np.ndarray:
    lx, ly, lz = state.factors
    return mode_n_multiply(lz, mode_n_multiply(ly, mode_n_multiply(lx, z, 1), 2), 3)


def sample_gaussian_field(state: CholeskySamplerState, sample_index: int) -> np.ndarray:
    z = standard_normals(state.base_seed, sample_index, state.dims)
    return correlate(state, z)


def clip_to_binary(u: np.ndarray, d_global: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    """1 where ``u >= d`` (ties included), else 0."""
    u = np.asarray(u)
    d_global = np.asarray(d_global)
    if u.shape != d_global.shape:
        raise ValueError(f"field shape {u.shape} != threshold shape {d_global.shape}")
    return VoxelGrid((u >= d_global).astype(np.uint8), spacing)


class Generator:
    """Reusable generator bound to one model and one output layout."""

    def __init__(self, params: KernelParams, threshold: np.ndarray, layout: UnitCellLayout, seed: int,
                 spacing=(1.0, 1.0, 1.0)):
        threshold = np.asarray(threshold, dtype=float)
        if threshold.ndim == 2:
            threshold = threshold[:, :, None]
        if threshold.shape != layout.cell_dims:
            raise LayoutError(f"threshold shape {threshold.shape} != cell dims {layout.cell_dims}")
        self.layout = layout
        self.spacing = tuple(spacing)
        self.d_global = tile_to_global(threshold, layout)
        self.state = CholeskySamplerState.build(layout.grid_dims, params, seed)

    def __call__(self, index: int) -> VoxelGrid:
        return clip_to_binary(sample_gaussian_field(self.state, index), self.d_global, self.spacing)


def generate_realization(params: KernelParams, threshold, layout: UnitCellLayout, seed: int, index: int,
                         spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    return Generator(params, threshold, layout, seed, spacing)(index)


def write_realizations(gen: Generator, indices, out_dir, prefix: str = "realization") -> list[dict]:
    """Save volumes and a manifest (index, seed, nugget, porosity)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in indices:
        grid = gen(int(i))
        stem = f"{prefix}_{int(i):06d}"
        save_volume(grid, out_dir / f"{stem}.txt", out_dir / f"{stem}.raw")
        rows.append({"index": int(i), "seed": gen.state.base_seed, "nugget": gen.state.nugget,
                     "porosity": porosity(grid), "file": f"{stem}.raw"})
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["index", "seed", "nugget", "porosity", "file"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "porosity": repr(r["porosity"]), "nugget": repr(r["nugget"])})
    return rows
