"""Thresholded Gaussian random fields for lattice microstructures.

Identification of per-voxel thresholds and separable Matérn correlation
from segmented scans, Kronecker-factored generation, voxel elasticity and
multilevel Monte Carlo moment estimation.
"""

from .numerics import GAUSSIAN_LIMIT, KernelParams, binary_cov_model, matern_rho
from .voxelgrid import UnitCellLayout, VoxelGrid, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "GAUSSIAN_LIMIT",
    "KernelParams",
    "UnitCellLayout",
    "VoxelGrid",
    "binary_cov_model",
    "load_volume",
    "matern_rho",
    "save_volume",
]
