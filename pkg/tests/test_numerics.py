import math

import numpy as np
import pytest
from scipy import stats

from latticerf.numerics import (
    GAUSSIAN_LIMIT,
    KernelParams,
    binary_cov_model,
    matern_rho,
    separable_rho,
    std_normal_cdf,
    std_normal_inv_cdf,
)

# 40-digit mpmath evaluations of 2^(1-nu)/Gamma(nu) x^nu K_nu(x), x = sqrt(2 nu) lag / l
MATERN_ORACLE = [
    ((1.0, 1.0, 0.5), 0.3678794411714423216),
    ((3.0, 2.0, 1.5), 0.26775660686440933481),
    ((15.0, 15.0, 0.52), 0.37242780239533871586),
    ((0.3, 4.0, 2.5), 0.99534265979275200735),
    ((7.0, 3.0, 0.104), 0.079139222148204885827),
    ((2.0, 10.0, 12.0), 0.97844132642655872505),
    ((40.0, 5.0, 0.8), 0.00010162726226924685672),
]

# mpmath quadrature of the bivariate normal density in the correlation argument, 40 digits
COV_ORACLE = [
    ((0.0, 0.0, 0.5), 0.083333333333333333333),
    ((1.0, -0.5, 0.3), 0.023551983072452270551),
    ((0.3, 0.3, 0.9), 0.16752578857281669701),
    ((-1.2, 0.7, 0.6), 0.025573514772075022767),
    ((2.0, 2.5, 0.95), 0.005833659092355330687),
    ((0.1, -0.1, 0.05), 0.0078798138915010414931),
    ((-0.8, -0.8, 0.99), 0.1506236942397505315),
]


class TestNormal:
    def test_cdf_values(self):
        assert std_normal_cdf(0.0) == 0.5
        assert std_normal_cdf(math.inf) == 1.0
        assert std_normal_cdf(-math.inf) == 0.0
        assert abs(std_normal_cdf(1.959964) - 0.975) < 1e-6

    def test_inverse_values(self):
        assert std_normal_inv_cdf(0.5) == 0.0
        assert abs(std_normal_inv_cdf(0.025) + 1.95996) < 1e-4
        assert std_normal_inv_cdf(1.0) == math.inf
        assert std_normal_inv_cdf(0.0) == -math.inf

    def test_round_trip(self, rng):
        u = rng.uniform(-6, 6, size=200)
        np.testing.assert_allclose(std_normal_inv_cdf(std_normal_cdf(u)), u, atol=1e-10)

    @pytest.mark.parametrize("p", [-0.1, 1.5, math.nan])
    def test_inverse_domain(self, p):
        with pytest.raises(ValueError):
            std_normal_inv_cdf(p)

    def test_cdf_nan(self):
        with pytest.raises(ValueError):
            std_normal_cdf(math.nan)


class TestMatern:
    @pytest.mark.parametrize("args,expected", MATERN_ORACLE)
    def test_against_oracle(self, args, expected):
        assert matern_rho(*args) == pytest.approx(expected, rel=1e-12, abs=1e-10)

    def test_zero_lag(self):
        for nu in (0.05, 0.5, 3.0, GAUSSIAN_LIMIT):
            assert matern_rho(0.0, 2.0, nu) == 1.0

    def test_exponential_case(self):
        lags = np.linspace(0.0, 30.0, 100)
        np.testing.assert_allclose(matern_rho(lags, 3.0, 0.5), np.exp(-lags / 3.0), rtol=0, atol=1e-10)

    def test_gaussian_limit(self):
        lags = np.linspace(0.0, 20.0, 50)
        np.testing.assert_allclose(matern_rho(lags, 4.0, GAUSSIAN_LIMIT), np.exp(-lags**2 / 32.0), atol=1e-12)

    def test_large_nu_approaches_gaussian(self):
        lags = np.linspace(0.0, 20.0, 200)
        assert np.max(np.abs(matern_rho(lags, 4.0, 50.0) - matern_rho(lags, 4.0, GAUSSIAN_LIMIT))) < 2e-2

    def test_monotone_and_bounded(self):
        lags = np.linspace(0.0, 100.0, 500)
        for nu in (0.1, 0.5, 2.0, 15.0):
            r = matern_rho(lags, 7.0, nu)
            assert np.all(np.diff(r) <= 1e-15)
            assert np.all((r >= 0) & (r <= 1))

    @pytest.mark.parametrize("args", [(-1.0, 1.0, 0.5), (1.0, 0.0, 0.5), (1.0, 1.0, -0.5), (1.0, 1.0, math.nan)])
    def test_domain(self, args):
        with pytest.raises(ValueError):
            matern_rho(*args)


class TestSeparable:
    def test_values(self):
        p = KernelParams((2.0, 3.0, 4.0), (0.5, 0.5, 1.5))
        assert separable_rho((0, 0, 0), p) == 1.0
        assert separable_rho((1.7, 0, 0), p) == pytest.approx(matern_rho(1.7, 2.0, 0.5), abs=1e-15)
        assert separable_rho((2.0, 3.0, 0), p) == pytest.approx(math.exp(-2.0), abs=1e-14)

    def test_params_dict_round_trip(self):
        p = KernelParams((2.0, 3.0, 4.0), (0.5, GAUSSIAN_LIMIT, 1.5))
        d = p.to_dict()
        assert d["smoothness"][1] == "gaussian"
        assert KernelParams.from_dict(d) == p


class TestBinaryCov:
    @pytest.mark.parametrize("args,expected", COV_ORACLE)
    def test_against_oracle(self, args, expected):
        assert binary_cov_model(*args) == pytest.approx(expected, abs=1e-13)

    def test_against_scipy_bivariate_cdf(self, rng):
        # independent route: P(U1 >= d1, U2 >= d2) - P(U1 >= d1) P(U2 >= d2)
        for _ in range(10):
            d1, d2 = rng.uniform(-2, 2, size=2)
            r = rng.uniform(0.05, 0.95)
            joint = stats.multivariate_normal(mean=[0, 0], cov=[[1, r], [r, 1]]).cdf([-d1, -d2])
            ref = joint - stats.norm.cdf(-d1) * stats.norm.cdf(-d2)
            assert binary_cov_model(d1, d2, r) == pytest.approx(ref, abs=1e-7)

    def test_independent(self):
        assert binary_cov_model(0.3, -0.4, 0.0) == 0.0

    def test_full_correlation_limit(self):
        for d1, d2 in [(0.2, 0.9), (-1.0, 0.5), (0.4, 0.4)]:
            expected = stats.norm.cdf(min(d1, d2)) - stats.norm.cdf(d1) * stats.norm.cdf(d2)
            assert binary_cov_model(d1, d2, 1.0) == pytest.approx(expected, abs=1e-15)
            assert binary_cov_model(d1, d2, 1.0 - 1e-9) == pytest.approx(expected, abs=1e-4)

    def test_infinite_threshold(self):
        assert binary_cov_model(math.inf, 0.0, 0.5) == 0.0
        assert binary_cov_model(0.0, -math.inf, 0.5) == 0.0

    def test_symmetry_and_broadcast(self, rng):
        d1 = rng.uniform(-1.5, 1.5, size=30)
        d2 = rng.uniform(-1.5, 1.5, size=30)
        rho = rng.uniform(0, 1, size=30)
        a = binary_cov_model(d1, d2, rho)
        np.testing.assert_allclose(a, binary_cov_model(d2, d1, rho), atol=1e-15)
        # sign flip of both thresholds leaves the covariance unchanged
        np.testing.assert_allclose(a, binary_cov_model(-d1, -d2, rho), atol=1e-14)
        assert binary_cov_model(d1[:, None], d2[None, :], 0.4).shape == (30, 30)

    def test_domain(self):
        with pytest.raises(ValueError):
            binary_cov_model(0.0, 0.0, 1.2)
        with pytest.raises(ValueError):
            binary_cov_model(math.nan, 0.0, 0.5)
