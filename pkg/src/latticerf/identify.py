"""Learn thresholds and per-axis Matern parameters from a pool of unit cells."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .numerics import (
    GAUSSIAN_LIMIT,
    KernelParams,
    binary_cov_model,
    is_gaussian_limit,
    matern_rho,
    std_normal_cdf,
    std_normal_inv_cdf,
)

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")
MEAN_FILTER = (0.1, 0.9)
LENGTH_LOWER = 0.5
NU_BOUNDS = (0.05, 20.0)
ILL_CONDITIONED = 1e6
N_REFINE = 2


class IdentificationError(ValueError):
    pass


class FitConvergenceError(RuntimeError):
    def __init__(self, msg, best: "AxisFit"):
        super().__init__(msg)
        self.best = best


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        return AXES.index(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, 2 or one of {AXES}, got {axis!r}")
    return int(axis)


@dataclass(frozen=True, eq=False)
class MeanField:
    values: np.ndarray

    @property
    def cell_dims(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class ThresholdField:
    values: np.ndarray

    @property
    def cell_dims(self):
        return self.values.shape


def estimate_mean_field(cells: np.ndarray) -> MeanField:
    cells = np.asarray(cells)
    if cells.ndim != 4 or cells.shape[0] == 0:
        raise IdentificationError("need a non-empty stack of cells shaped (N, c_x, c_y, c_z)")
    counts = cells.sum(axis=0, dtype=np.int64)
    return MeanField(counts / cells.shape[0])


def mean_to_threshold(mean: MeanField) -> ThresholdField:
    """``d = Phi^-1(1 - mu)``; always-void voxels get ``+inf``, always-material ``-inf``."""
    return ThresholdField(std_normal_inv_cdf(1.0 - np.asarray(mean.values, dtype=float)))


def threshold_to_mean(threshold: ThresholdField) -> np.ndarray:
    return 1.0 - std_normal_cdf(threshold.values)


@dataclass(eq=False)
class CovSampleSet:
    """Binary covariance estimates for one axis, one record per voxel pair."""

    axis: int
    extent: int
    lag: np.ndarray
    d_i: np.ndarray
    d_j: np.ndarray
    gamma: np.ndarray

    @property
    def n_data(self) -> int:
        return int(self.lag.size)

    @property
    def n_lags(self) -> int:
        return int(self.lag.max()) if self.lag.size else 0

    def subset(self, max_lag: int) -> "CovSampleSet":
        keep = self.lag <= max_lag
        return CovSampleSet(self.axis, self.extent, self.lag[keep], self.d_i[keep], self.d_j[keep], self.gamma[keep])

    def to_dict(self) -> dict:
        return {
            "axis": AXES[self.axis],
            "extent": self.extent,
            "lag": self.lag.tolist(),
            "d_i": self.d_i.tolist(),
            "d_j": self.d_j.tolist(),
            "gamma": self.gamma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovSampleSet":
        return cls(
            _axis_index(d["axis"]),
            int(d["extent"]),
            np.asarray(d["lag"], dtype=np.int64),
            np.asarray(d["d_i"], dtype=float),
            np.asarray(d["d_j"], dtype=float),
            np.asarray(d["gamma"], dtype=float),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lag", "d_i", "d_j", "gamma_hat"])
            for row in zip(self.lag.tolist(), self.d_i.tolist(), self.d_j.tolist(), self.gamma.tolist()):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    @classmethod
    def read_csv(cls, path, axis, extent) -> "CovSampleSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(_axis_index(axis), int(extent), data[:, 0].astype(np.int64), data[:, 1], data[:, 2], data[:, 3])


def estimate_binary_cov(
    cells: np.ndarray,
    mean: MeanField,
    axis,
    n_lags: int,
    *,
    include_zero_lag: bool = False,
    mean_filter: tuple[float, float] = MEAN_FILTER,
) -> CovSampleSet:
    """Sample covariance (N_cells denominator) of axis-aligned in-cell voxel pairs.

    The first point of every pair runs over ``[0, n - n_lags)`` along the axis
    so that each lag contributes the same number of pairs and no pair wraps
    across a cell boundary. Pairs with either mean outside ``mean_filter`` are
    dropped.
    """
    a = _axis_index(axis)
    cells = np.asarray(cells)
    n_cells = cells.shape[0]
    mu = np.asarray(mean.values, dtype=float)
    if cells.shape[1:] != mu.shape:
        raise IdentificationError(f"cell shape {cells.shape[1:]} != mean field shape {mu.shape}")
    extent = mu.shape[a]
    if n_lags < 1 or n_lags >= extent:
        raise IdentificationError(f"n_lags must be in [1, {extent - 1}] along axis {AXES[a]}, got {n_lags}")

    lo, hi = mean_filter
    ok = (mu >= lo) & (mu <= hi)
    d = std_normal_inv_cdf(1.0 - mu)
    counts = cells.sum(axis=0, dtype=np.int64)
    # integer numerators (one rounding) when the mean field came from these cells
    exact = bool(np.array_equal(counts / n_cells, mu))
    c_m = np.moveaxis(counts, a, 0)
    y = np.moveaxis(cells, a + 1, 1).astype(np.int32)
    mu_m = np.moveaxis(mu, a, 0)
    ok_m = np.moveaxis(ok, a, 0)
    d_m = np.moveaxis(d, a, 0)
    n_first = extent - n_lags

    lags, di, dj, gam = [], [], [], []
    first = slice(0, n_first)
    for lag in range(0 if include_zero_lag else 1, n_lags + 1):
        second = slice(lag, lag + n_first)
        keep = ok_m[first] & ok_m[second]
        if not keep.any():
            continue
        # integer co-occurrence counts keep the estimate independent of cell order
        co = np.einsum("n...,n...->...", y[:, first], y[:, second], dtype=np.int64)
        if exact:
            g = (n_cells * co - c_m[first] * c_m[second]) / float(n_cells) ** 2
        else:
            g = co / n_cells - mu_m[first] * mu_m[second]
        lags.append(np.full(int(keep.sum()), lag, dtype=np.int64))
        di.append(d_m[first][keep])
        dj.append(d_m[second][keep])
        gam.append(g[keep])
    if not lags:
        raise IdentificationError(f"no voxel pairs survive the mean filter along axis {AXES[a]}")
    return CovSampleSet(a, extent, np.concatenate(lags), np.concatenate(di), np.concatenate(dj), np.concatenate(gam))


# -- fitting ------------------------------------------------------------------


def model_covariance(samples: CovSampleSet, length: float, nu: float, tol: float = 1e-12) -> np.ndarray:
    lags = np.unique(samples.lag)
    rho_by_lag = dict(zip(lags.tolist(), np.atleast_1d(matern_rho(lags, length, nu)).tolist()))
    rho = np.array([rho_by_lag[k] for k in samples.lag.tolist()]) if samples.n_data else np.zeros(0)
    return np.atleast_1d(binary_cov_model(samples.d_i, samples.d_j, rho, tol=tol))


def residual_sq(samples: CovSampleSet, length: float, nu: float) -> float:
    r = samples.gamma - model_covariance(samples, length, nu)
    return float(r @ r)


@dataclass
class AxisFit:
    axis: int
    length: float
    length_std: float
    nu: float
    nu_std: float
    residual: float
    n_lags: int
    n_data: int
    converged: bool = True
    condition_number: float = 1.0
    ill_conditioned: bool = False

    @property
    def gaussian(self) -> bool:
        return is_gaussian_limit(self.nu)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axis"] = AXES[self.axis]
        if self.gaussian:
            d["nu"] = "gaussian"
        for k in ("condition_number",):
            if not math.isfinite(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AxisFit":
        d = dict(d)
        d["axis"] = _axis_index(d["axis"])
        if d["nu"] == "gaussian":
            d["nu"] = GAUSSIAN_LIMIT
        if d.get("condition_number") is None:
            d["condition_number"] = math.inf
        return cls(**d)


def _length_bounds(samples: CovSampleSet) -> tuple[float, float]:
    return LENGTH_LOWER, 10.0 * samples.extent


def _param_std(samples, length, nu, residual, gaussian):
    """Gauss-Newton standard deviations and condition number of ``J^T J``.

    Both use the natural parameters ``(l, nu)``, the coordinates in which the
    objective landscape is inspected; the condition number therefore grows
    with the length scale when ``l`` and ``nu`` trade off along a ridge.
    """
    params = np.array([length] if gaussian else [length, nu])
    cols = []
    for k in range(params.size):
        h = 1e-5 * params[k]
        up, dn = params.copy(), params.copy()
        up[k] += h
        dn[k] -= h
        f = lambda p: model_covariance(samples, p[0], GAUSSIAN_LIMIT if gaussian else p[1])
        cols.append((f(up) - f(dn)) / (2 * h))
    jac = np.column_stack(cols)
    jtj = jac.T @ jac
    dof = max(samples.n_data - params.size, 1)
    s2 = residual / dof
    cond = float(np.linalg.cond(jtj)) if np.all(np.isfinite(jtj)) else math.inf
    try:
        cov = s2 * np.linalg.inv(jtj)
        std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        std = np.full(params.size, math.inf)
    if not math.isfinite(cond):
        cond = math.inf
    return std, cond


def fit_axis(samples: CovSampleSet, mode: str = "matern", *, starts: Sequence[tuple[float, float]] | None = None) -> AxisFit:
    """Least-squares Matern fit of one axis.

    ``mode`` is ``"matern"`` (free length and smoothness) or ``"gaussian"``
    (smoothness fixed at the Gaussian limit). The objective is evaluated on a
    fixed grid of starts in log-parameter space and bounded Nelder-Mead
    refines the ``N_REFINE`` best of them; the lowest residual wins, ties
    broken by start order.
    """
    if mode not in ("matern", "gaussian"):
        raise ValueError(f"unknown fit mode {mode!r}")
    if samples.n_data == 0:
        raise IdentificationError("empty covariance sample set")
    if samples.n_data < 10:
        raise IdentificationError(f"need at least 10 covariance samples, got {samples.n_data}")
    gaussian = mode == "gaussian"
    l_lo, l_hi = _length_bounds(samples)
    ext = samples.extent

    if starts is None:
        l_starts = [min(max(f * ext, l_lo), l_hi) for f in (0.1, 0.5, 2.0)]
        nu_starts = [None] if gaussian else [0.3, 1.0, 3.0]
        starts = [(l0, n0) for l0 in l_starts for n0 in nu_starts]

    if gaussian:
        bounds = [(math.log(l_lo), math.log(l_hi))]

        def objective(p):
            return residual_sq(samples, math.exp(p[0]), GAUSSIAN_LIMIT)
    else:
        bounds = [(math.log(l_lo), math.log(l_hi)), tuple(math.log(v) for v in NU_BOUNDS)]

        def objective(p):
            return residual_sq(samples, math.exp(p[0]), math.exp(p[1]))

    # cheap pre-scan of the start grid; local refinement from the two best
    x_starts = [[math.log(l0)] if gaussian else [math.log(l0), math.log(n0)] for l0, n0 in starts]
    f_starts = [objective(x) for x in x_starts]
    order = sorted(range(len(x_starts)), key=lambda k: (f_starts[k], k))[:N_REFINE]
    fscale = max(min(f_starts), 1e-300)

    best = None
    any_ok = False
    for k in order:
        x0 = x_starts[k]
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-6, "fatol": 1e-10 * fscale, "maxiter": 600 * len(x0)},
        )
        any_ok |= bool(res.success)
        if best is None or res.fun < best.fun:
            best = res

    length = math.exp(best.x[0])
    nu = GAUSSIAN_LIMIT if gaussian else math.exp(best.x[1])
    residual = float(best.fun)
    std, cond = _param_std(samples, length, nu, residual, gaussian)
    fit = AxisFit(
        axis=samples.axis,
        length=length,
        length_std=float(std[0]),
        nu=nu,
        nu_std=0.0 if gaussian else float(std[1]),
        residual=residual,
        n_lags=samples.n_lags,
        n_data=samples.n_data,
        converged=any_ok,
        condition_number=cond,
        ill_conditioned=cond > ILL_CONDITIONED,
    )
    if not any_ok:
        raise FitConvergenceError(f"no Nelder-Mead start converged along axis {AXES[samples.axis]}", fit)
    if fit.ill_conditioned:
        log.warning(
            "axis %s: near-flat objective (condition number %.3g); length/smoothness poorly identified",
            AXES[samples.axis],
            cond,
        )
    return fit


def residual_grid(samples: CovSampleSet, l_values: Sequence[float], nu_values: Sequence[float]) -> np.ndarray:
    """Objective value on a tensor grid, shape ``(len(l_values), len(nu_values))``."""
    if samples.n_data == 0:
        raise IdentificationError("empty covariance sample set")
    if not len(l_values) or not len(nu_values):
        raise ValueError("grids must be non-empty")
    out = np.empty((len(l_values), len(nu_values)))
    for i, length in enumerate(l_values):
        for j, nu in enumerate(nu_values):
            out[i, j] = residual_sq(samples, float(length), float(nu))
    return out


@dataclass
class LagStudy:
    lag_counts: list[int]
    fits: list[AxisFit]
    length_drift: bool = False

    def rows(self) -> list[dict]:
        return [
            {"n_lags": n, "length": f.length, "length_std": f.length_std, "nu": f.nu, "nu_std": f.nu_std,
             "residual": f.residual, "condition_number": f.condition_number, "ill_conditioned": f.ill_conditioned}
            for n, f in zip(self.lag_counts, self.fits)
        ]


def length_drifts(fits: Sequence[AxisFit], rel: float = 0.1) -> bool:
    """True when the fitted length keeps growing with the lag count.

    Growth means the last fit exceeds the first by more than ``rel`` and no
    step shrinks the length by more than ``rel / 10``.
    """
    if len(fits) < 2:
        return False
    lengths = np.array([f.length for f in fits])
    steps = np.diff(lengths) / lengths[:-1]
    return bool(lengths[-1] > (1 + rel) * lengths[0] and np.all(steps > -rel / 10))


def lag_convergence_study(cells, mean: MeanField, axis, lag_list: Sequence[int], mode: str = "matern") -> LagStudy:
    lag_list = [int(n) for n in lag_list]
    if not lag_list or any(b <= a for a, b in zip(lag_list, lag_list[1:])):
        raise ValueError("lag_list must be a non-empty increasing sequence")
    full = estimate_binary_cov(cells, mean, axis, lag_list[-1])
    fits = []
    for n in lag_list:
        # pairs start in [0, extent - n), so each lag count gets its own extraction
        s = full if n == lag_list[-1] else estimate_binary_cov(cells, mean, axis, n)
        fits.append(fit_axis(s, mode))
    return LagStudy(lag_list, fits, length_drifts(fits))


# -- full identification ---------------------------------------------------------


@dataclass
class IdentifiedModel:
    cell_dims: tuple[int, int, int]
    mean: MeanField
    threshold: ThresholdField
    fits: dict[int, AxisFit] = field(default_factory=dict)
    samples: dict[int, CovSampleSet] = field(default_factory=dict)

    def kernel(self) -> KernelParams:
        lengths, nus = [], []
        for a in range(3):
            f = self.fits.get(a)
            if f is None:
                # degenerate axis (extent 1): parameters are never used
                lengths.append(1.0)
                nus.append(0.5)
            else:
                lengths.append(f.length)
                nus.append(f.nu)
        return KernelParams(tuple(lengths), tuple(nus))


def identify_cells(cells, n_lags: Sequence[int], mode: str = "matern") -> IdentifiedModel:
    """Mean field, thresholds and per-axis fits for every axis with extent > 1."""
    cells = np.asarray(cells)
    mean = estimate_mean_field(cells)
    threshold = mean_to_threshold(mean)
    model = IdentifiedModel(tuple(mean.values.shape), mean, threshold)
    for a in range(3):
        if mean.values.shape[a] < 2 or not n_lags[a]:
            continue
        s = estimate_binary_cov(cells, mean, a, int(n_lags[a]))
        model.samples[a] = s
        model.fits[a] = fit_axis(s, mode)
    return model
