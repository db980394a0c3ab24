"""Scalar quantities of interest on binary volumes.

The homogenized modulus comes from a small-strain linear elastic solve on
trilinear hexahedra, one element per voxel. Void voxels keep a tiny
stiffness (``void_factor * E``) so disconnected realizations stay solvable.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .voxelgrid import VoxelGrid, porosity

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")


class SolverError(RuntimeError):
    def __init__(self, msg, residual: float):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class ElasticitySetup:
    E_material: float = 1.0
    poisson: float = 0.3
    applied_strain: float = 1e-3
    load_axis: int = 0
    void_factor: float = 1e-9
    rtol: float = 1e-8
    max_iter: int = 20000

    def __post_init__(self):
        if isinstance(self.load_axis, str):
            object.__setattr__(self, "load_axis", AXES.index(self.load_axis))
        if not self.E_material > 0:
            raise ValueError("E_material must be positive")
        if not 0 < self.poisson < 0.5:
            raise ValueError("poisson must lie in (0, 0.5)")
        if not 0 < self.void_factor < 1e-2:
            raise ValueError("void_factor must be small and positive")
        if self.applied_strain == 0:
            raise ValueError("applied_strain must be nonzero")
        if self.load_axis not in (0, 1, 2):
            raise ValueError("load_axis must be 0, 1 or 2")


@dataclass(frozen=True)
class LevelSpec:
    """Level ``level`` of ``n_levels``; coarsening factor ``2**(n_levels - 1 - level)``."""

    level: int
    n_levels: int
    fine_dims: tuple[int, int, int]

    @property
    def factor(self) -> int:
        return 2 ** (self.n_levels - 1 - self.level)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(n if n == 1 else n // self.factor for n in self.fine_dims)

    @property
    def dofs(self) -> int:
        """Nodal displacement unknowns of the level's voxel mesh."""
        return 3 * int(np.prod([n + 1 for n in self.dims]))


def coarsen(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Block majority: a block becomes material when its material fraction is >= 0.5.

    Axes of extent 1 (2D slices) are left alone.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    if factor == 1:
        return grid
    dims = grid.dims
    f = tuple(1 if n == 1 else factor for n in dims)
    if any(n % k for n, k in zip(dims, f)):
        raise ValueError(f"dims {dims} not divisible by coarsening factor {factor}")
    blocks = grid.data.reshape(dims[0] // f[0], f[0], dims[1] // f[1], f[1], dims[2] // f[2], f[2])
    material = blocks.sum(axis=(1, 3, 5), dtype=np.int64)
    coarse = (2 * material >= f[0] * f[1] * f[2]).astype(np.uint8)
    return VoxelGrid(coarse, tuple(s * k for s, k in zip(grid.spacing, f)))


# -- finite elements -------------------------------------------------------

# local node order: bit 0 -> x, bit 1 -> y, bit 2 -> z
_CORNERS = np.array([[(n >> 0) & 1, (n >> 1) & 1, (n >> 2) & 1] for n in range(8)], dtype=float)


@lru_cache(maxsize=32)
def element_stiffness(h: tuple[float, float, float], poisson: float) -> np.ndarray:
    """24x24 stiffness of a box element with edges ``h`` and unit Young's modulus."""
    nu = poisson
    lam = nu / ((1 + nu) * (1 - 2 * nu))
    mu = 1.0 / (2 * (1 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[3:, 3:] = mu * np.eye(3)

    h = np.asarray(h, dtype=float)
    g = 0.5 * (1 + np.array([-1, 1]) / math.sqrt(3.0))
    ke = np.zeros((24, 24))
    s = 2 * _CORNERS - 1
    for gx in g:
        for gy in g:
            for gz in g:
                p = np.array([gx, gy, gz])
                # trilinear shape gradients in reference coords [0, 1]^3
                f = np.where(_CORNERS == 1, p, 1 - p)
                dN = np.empty((8, 3))
                dN[:, 0] = s[:, 0] * f[:, 1] * f[:, 2] / h[0]
                dN[:, 1] = s[:, 1] * f[:, 0] * f[:, 2] / h[1]
                dN[:, 2] = s[:, 2] * f[:, 0] * f[:, 1] / h[2]
                B = np.zeros((6, 24))
                B[0, 0::3] = dN[:, 0]
                B[1, 1::3] = dN[:, 1]
                B[2, 2::3] = dN[:, 2]
                B[3, 0::3] = dN[:, 1]
                B[3, 1::3] = dN[:, 0]
                B[4, 1::3] = dN[:, 2]
                B[4, 2::3] = dN[:, 1]
                B[5, 0::3] = dN[:, 2]
                B[5, 2::3] = dN[:, 0]
                ke += B.T @ D @ B * (h.prod() / 8.0)
    ke.flags.writeable = False
    return ke


def _node_ids(dims):
    nx, ny, nz = dims
    return np.arange((nx + 1) * (ny + 1) * (nz + 1)).reshape((nx + 1, ny + 1, nz + 1), order="F")


def assemble_stiffness(grid: VoxelGrid, setup: ElasticitySetup) -> sparse.csr_matrix:
    dims = grid.dims
    nodes = _node_ids(dims)
    ex, ey, ez = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    ex, ey, ez = ex.ravel(order="F"), ey.ravel(order="F"), ez.ravel(order="F")
    c = _CORNERS.astype(int)
    conn = nodes[ex[:, None] + c[:, 0], ey[:, None] + c[:, 1], ez[:, None] + c[:, 2]]
    dofs = (3 * conn[:, :, None] + np.arange(3)).reshape(-1, 24)

    stiff = np.where(grid.data.ravel(order="F") == 1, 1.0, setup.void_factor) * setup.E_material
    ke = element_stiffness(tuple(grid.spacing), setup.poisson)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    vals = (stiff[:, None] * ke.ravel()[None, :]).ravel()
    n = 3 * nodes.size
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def boundary_conditions(dims, spacing, setup: ElasticitySetup):
    """Prescribed DOFs and values for the tensile setup.

    The load-axis face at the minimum coordinate is fixed in the load
    direction; the opposite face is displaced by ``strain * length``. Three
    more constraints remove the remaining rigid-body modes: the origin node
    is pinned in both transverse directions and the node at the far end of
    the first transverse axis is fixed in the second transverse direction.
    """
    a = setup.load_axis
    b, c = [k for k in range(3) if k != a]
    nodes = _node_ids(dims)
    length = dims[a] * spacing[a]
    lo = np.take(nodes, 0, axis=a).ravel()
    hi = np.take(nodes, dims[a], axis=a).ravel()
    origin = nodes[0, 0, 0]
    far = [0, 0, 0]
    far[b] = dims[b]
    far_node = nodes[tuple(far)]
    fixed = np.concatenate([3 * lo + a, 3 * hi + a, [3 * origin + b, 3 * origin + c, 3 * far_node + c]])
    values = np.concatenate([np.zeros(lo.size), np.full(hi.size, setup.applied_strain * length), np.zeros(3)])
    return fixed.astype(np.int64), values, 3 * hi + a


def _reduce(K, fixed, values):
    n = K.shape[0]
    u = np.zeros(n)
    u[fixed] = values
    free = np.setdiff1d(np.arange(n), fixed)
    rhs = -(K @ u)[free]
    K_ff = K[free][:, free]
    return u, free, K_ff, rhs


def _modulus(K, u, loaded, dims, spacing, setup):
    a = setup.load_axis
    b, c = [k for k in range(3) if k != a]
    force = float((K @ u)[loaded].sum())
    area = dims[b] * spacing[b] * dims[c] * spacing[c]
    return force / area / setup.applied_strain


def solve_homogenized_E(grid: VoxelGrid, setup: ElasticitySetup = ElasticitySetup()) -> float:
    """Reaction-force mean stress on the loaded face divided by the applied strain.

    Solved with Jacobi-preconditioned conjugate gradients to relative
    residual ``setup.rtol``.
    """
    K = assemble_stiffness(grid, setup)
    fixed, values, loaded = boundary_conditions(grid.dims, grid.spacing, setup)
    u, free, K_ff, rhs = _reduce(K, fixed, values)
    diag = K_ff.diagonal()
    M = splinalg.LinearOperator(K_ff.shape, matvec=lambda x: x / diag, dtype=float)
    # initial guess: affine stretch along the load axis, exact for uniform material
    x0 = _affine_guess(grid.dims, grid.spacing, setup)[free]
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        u_f = np.zeros_like(rhs)
    else:
        u_f, info = splinalg.cg(K_ff, rhs, x0=x0, rtol=setup.rtol, atol=0.0, maxiter=setup.max_iter, M=M)
        res = float(np.linalg.norm(rhs - K_ff @ u_f) / bnorm)
        if info != 0:
            raise SolverError(f"CG did not converge in {setup.max_iter} iterations (relative residual {res:.3g})", res)
    u[free] = u_f
    return _modulus(K, u, loaded, grid.dims, grid.spacing, setup)


def solve_homogenized_E_dense(grid: VoxelGrid, setup: ElasticitySetup = ElasticitySetup()) -> float:
    """Same problem solved with a dense direct factorization (small meshes only)."""
    K = assemble_stiffness(grid, setup)
    fixed, values, loaded = boundary_conditions(grid.dims, grid.spacing, setup)
    u, free, K_ff, rhs = _reduce(K, fixed, values)
    u[free] = np.linalg.solve(K_ff.toarray(), rhs)
    return _modulus(K, u, loaded, grid.dims, grid.spacing, setup)


def _affine_guess(dims, spacing, setup):
    nodes = _node_ids(dims)
    coord = np.indices(nodes.shape)[setup.load_axis] * spacing[setup.load_axis]
    u = np.zeros(3 * nodes.size)
    u[3 * nodes.ravel(order="F") + setup.load_axis] = setup.applied_strain * coord.ravel(order="F")
    return u


QOI_KINDS = ("porosity", "youngs_modulus")


def evaluate_qoi(grid: VoxelGrid, setup: ElasticitySetup | None, level: LevelSpec, kind: str) -> tuple[float, float]:
    """Coarsen to ``level`` and evaluate; returns ``(value, seconds)``."""
    if kind not in QOI_KINDS:
        raise ValueError(f"unknown QoI kind {kind!r}")
    if tuple(grid.dims) != tuple(level.fine_dims):
        raise ValueError(f"grid dims {grid.dims} do not match level hierarchy {level.fine_dims}")
    t0 = time.perf_counter()
    g = coarsen(grid, level.factor)
    if kind == "porosity":
        value = porosity(g)
    else:
        value = solve_homogenized_E(g, setup or ElasticitySetup())
    return value, time.perf_counter() - t0
