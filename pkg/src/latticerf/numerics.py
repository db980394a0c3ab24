"""Special functions behind the binary-field model.

Thresholds use IEEE ``+inf``/``-inf`` as explicit sentinels for voxels that
are always void (``+inf``) or always material (``-inf``). The Gaussian
correlation kernel is requested with smoothness ``GAUSSIAN_LIMIT``
(``math.inf``), the ``nu -> inf`` limit of the Matern family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

GAUSSIAN_LIMIT = math.inf

_TWO_PI = 2.0 * math.pi


def std_normal_cdf(u):
    u = np.asarray(u, dtype=float)
    if np.isnan(u).any():
        raise ValueError("NaN passed to std_normal_cdf")
    out = special.ndtr(u)
    return float(out) if out.ndim == 0 else out


def std_normal_inv_cdf(p):
    """Standard normal quantile; ``p = 0`` and ``p = 1`` map to ``-inf``/``+inf``."""
    p = np.asarray(p, dtype=float)
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def is_gaussian_limit(nu) -> bool:
    return math.isinf(nu) and nu > 0


def _check_kernel_params(length, nu):
    if not (length > 0) or math.isinf(length):
        raise ValueError(f"correlation length must be positive and finite, got {length}")
    if not (nu > 0):
        raise ValueError(f"smoothness must be positive, got {nu}")


def matern_rho(lag, length: float, nu: float):
    """One-dimensional Matern correlation at (nonnegative) ``lag``.

    Evaluates ``2^(1-nu)/Gamma(nu) * x^nu * K_nu(x)`` with
    ``x = sqrt(2 nu) * lag / length``. Zero lag returns exactly 1.
    """
    _check_kernel_params(length, nu)
    lag = np.asarray(lag, dtype=float)
    if (lag < 0).any() or np.isnan(lag).any():
        raise ValueError("lags must be nonnegative")
    scalar = lag.ndim == 0
    lag = np.atleast_1d(lag)

    if is_gaussian_limit(nu):
        out = np.exp(-0.5 * (lag / length) ** 2)
    else:
        out = np.ones_like(lag)
        pos = lag > 0
        x = math.sqrt(2.0 * nu) * lag[pos] / length
        # log form avoids overflow of x^nu * K_nu(x) for large nu
        with np.errstate(divide="ignore", over="ignore"):
            log_k = np.log(special.kve(nu, x)) - x
            log_rho = (1.0 - nu) * math.log(2.0) - special.gammaln(nu) + nu * np.log(x) + log_k
        vals = np.exp(log_rho)
        bad = ~np.isfinite(log_rho)
        if bad.any():
            # only reachable for x so small that K_nu overflows
            xs = x[bad]
            if nu > 1:
                vals[bad] = 1.0 - xs**2 / (4.0 * (nu - 1.0))
            else:
                vals[bad] = 1.0
        out[pos] = np.clip(vals, 0.0, 1.0)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class KernelParams:
    """Per-axis Matern parameters, lengths in voxels."""

    lengths: tuple[float, float, float]
    smoothness: tuple[float, float, float]

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        nus = tuple(float(v) for v in self.smoothness)
        if len(lengths) != 3 or len(nus) != 3:
            raise ValueError("KernelParams needs three lengths and three smoothness values")
        for length, nu in zip(lengths, nus):
            _check_kernel_params(length, nu)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "smoothness", nus)

    def axis(self, a: int) -> tuple[float, float]:
        return self.lengths[a], self.smoothness[a]

    def to_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "smoothness": [("gaussian" if is_gaussian_limit(n) else n) for n in self.smoothness],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        nus = [GAUSSIAN_LIMIT if n == "gaussian" else float(n) for n in d["smoothness"]]
        return cls(tuple(d["lengths"]), tuple(nus))


def separable_rho(lag_vec, params: KernelParams):
    """Product of the three axis correlations; ``lag_vec[..., a]`` is the lag along axis ``a``."""
    lag_vec = np.asarray(lag_vec, dtype=float)
    if lag_vec.shape[-1] != 3:
        raise ValueError("lag vectors need three components")
    out = np.ones(lag_vec.shape[:-1])
    for a in range(3):
        out = out * matern_rho(lag_vec[..., a], *params.axis(a))
    return float(out) if out.ndim == 0 else out


# -- binary covariance -----------------------------------------------------

_GL_ORDER = 20
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)


def _theta_integrand(theta, d1, d2):
    s = np.sin(theta)
    c2 = np.cos(theta) ** 2
    num = d1 * d1 + d2 * d2 - 2.0 * d1 * d2 * s
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.where(c2 > 0, -num / (2.0 * c2), -np.inf)
    # at theta = pi/2 the limit is finite only for d1 == d2
    expo = np.where((c2 <= 0) & (d1 == d2), -0.5 * d1 * d1, expo)
    return np.exp(expo) / _TWO_PI


def _panel_sum(a, d1, d2, n_panels):
    """Composite Gauss-Legendre over theta in [0, a] for each entry."""
    h = a / n_panels
    total = np.zeros_like(a)
    for p in range(n_panels):
        mid = (p + 0.5) * h
        theta = mid[:, None] + 0.5 * h[:, None] * _GL_X[None, :]
        f = _theta_integrand(theta, d1[:, None], d2[:, None])
        total += 0.5 * h * (f @ _GL_W)
    return total


def binary_cov_model(d1, d2, rho, tol: float = 1e-12):
    """Covariance of two thresholded standard-normal indicators.

    ``Cov[1{U1 >= d1}, 1{U2 >= d2}]`` for ``corr(U1, U2) = rho`` in ``[0, 1]``,
    evaluated as the single-fold integral over ``z in [0, rho]`` after the
    substitution ``z = sin(theta)``. Arguments broadcast; infinite thresholds
    give 0.
    """
    d1, d2, rho = np.broadcast_arrays(
        np.asarray(d1, dtype=float), np.asarray(d2, dtype=float), np.asarray(rho, dtype=float)
    )
    if np.isnan(d1).any() or np.isnan(d2).any() or np.isnan(rho).any():
        raise ValueError("NaN passed to binary_cov_model")
    if (rho < 0).any() or (rho > 1).any():
        raise ValueError("rho must lie in [0, 1]")
    shape = d1.shape
    d1, d2, rho = d1.ravel(), d2.ravel(), rho.ravel()
    out = np.zeros(d1.shape)

    finite = np.isfinite(d1) & np.isfinite(d2)
    one = finite & (rho >= 1.0)
    if one.any():
        lo = np.minimum(d1[one], d2[one])
        out[one] = special.ndtr(lo) - special.ndtr(d1[one]) * special.ndtr(d2[one])

    todo = np.flatnonzero(finite & (rho > 0) & (rho < 1.0))
    if todo.size:
        a = np.arcsin(rho[todo])
        x1, x2 = d1[todo], d2[todo]
        n_panels = 1
        coarse = _panel_sum(a, x1, x2, n_panels)
        result = np.empty_like(coarse)
        idx = np.arange(todo.size)
        while True:
            fine = _panel_sum(a[idx], x1[idx], x2[idx], 2 * n_panels)
            done = np.abs(fine - coarse) <= tol
            result[idx[done]] = fine[done]
            n_panels *= 2
            if done.all() or n_panels > 1024:
                result[idx[~done]] = fine[~done]
                break
            idx, coarse = idx[~done], fine[~done]
        out[todo] = result
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out
