import numpy as np
import pytest

from snips.operators import LinearOperator, svd_decompose
from snips.oracle import exact_conditional_gaussian
from snips.priors import GaussianPrior
from snips.schedule import partition_spectrum
from snips.score import (
    BoundaryWarning,
    ConditionalScoreInputs,
    conditional_score,
    measurement_weights,
    step_sizes,
)


def diag_svd(values):
    return svd_decompose(LinearOperator(np.diag(values)))


def unified_reference(x_t, y_t, g_t, svd, partition):
    """Matrix form of the score: Sigma^T |s0^2 I - si^2 Sigma Sigma^T|^+ r
    plus the prior term zeroed where the annealing noise dominates."""
    n, m = svd.n, svd.m
    k = min(m, n)
    sig = np.zeros((m, n))
    sig[np.arange(k), np.arange(k)] = svd.extended_singulars[:k]
    gram = np.abs(partition.sigma0**2 * np.eye(m) - partition.sigma_i**2 * sig @ sig.T)
    inv = np.zeros_like(gram)
    diag = np.diag(gram)
    nz = diag > 0
    inv[np.diag_indices(m)] = np.where(nz, 1.0 / np.where(nz, diag, 1.0), 0.0)
    d = sig.T @ inv @ (y_t - sig @ x_t)
    keep = np.ones(n, dtype=bool)
    keep[partition.greater] = False
    d[keep] += g_t[keep]
    return d


class TestConditionalScore:
    def test_scalar_measurement_regime(self):
        svd = diag_svd([1.0])
        prior = GaussianPrior(np.zeros(1), np.eye(1))
        inp = ConditionalScoreInputs(
            y_t=np.array([0.5]), x=np.zeros(1), sigma_i=1.0, sigma0=0.1,
            svd=svd, prior=prior,
        )
        part = partition_spectrum(1.0, 0.1, svd)
        d = conditional_score(inp, part)
        np.testing.assert_allclose(d, [0.5 / 0.99], rtol=1e-12)

    def test_zero_operator_is_pure_synthesis(self):
        rng = np.random.default_rng(0)
        svd = svd_decompose(LinearOperator(np.zeros((2, 4))))
        a = rng.standard_normal((4, 4))
        prior = GaussianPrior(rng.standard_normal(4), a @ a.T + np.eye(4))
        x = rng.standard_normal(4)
        part = partition_spectrum(0.8, 0.3, svd)
        inp = ConditionalScoreInputs(np.array([5.0, -3.0]), x, 0.8, 0.3, svd, prior)
        d = conditional_score(inp, part)
        np.testing.assert_allclose(d, svd.v.T @ prior.score(x, 0.8), rtol=1e-12)

    @pytest.mark.parametrize("sigma_i", [1.0, 0.05])
    def test_matches_exact_gaussian_conditional_1d(self, sigma_i):
        svd = diag_svd([1.0])
        prior = GaussianPrior(np.zeros(1), np.eye(1))
        y = np.array([0.7])
        part = partition_spectrum(sigma_i, 0.1, svd)
        cond = exact_conditional_gaussian(prior, svd, sigma_i, 0.1, y)
        for xv in np.linspace(-1.5, 1.5, 7):
            inp = ConditionalScoreInputs(y, np.array([xv]), sigma_i, 0.1, svd, prior)
            ours = conditional_score(inp, part)[0]
            exact = cond.score(np.array([xv]))[0]
            assert abs(ours - exact) <= 1e-8 * max(1.0, abs(exact))

    def test_matches_exact_conditional_mixed_spectrum(self):
        # prior diagonal in the transform basis: the score formula is exact
        svd = diag_svd([1.2, 0.4, 0.0])
        prior = GaussianPrior(np.array([0.1, -0.2, 0.3]), np.diag([0.5, 0.8, 0.3]))
        rng = np.random.default_rng(1)
        y = rng.standard_normal(3)
        for sigma_i in (2.0, 0.6, 0.12):
            part = partition_spectrum(sigma_i, 0.3, svd)
            cond = exact_conditional_gaussian(prior, svd, sigma_i, 0.3, y)
            for _ in range(5):
                x = rng.standard_normal(3)
                inp = ConditionalScoreInputs(y, x, sigma_i, 0.3, svd, prior)
                ours = conditional_score(inp, part)
                exact = cond.score(svd.v.T @ x)
                np.testing.assert_allclose(ours, exact, rtol=1e-6, atol=1e-9)

    def test_measurement_term_support(self):
        # silent coordinates must ignore the measurement entirely
        svd = diag_svd([1.0, 0.0])
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        x = np.array([0.4, -0.7])
        part = partition_spectrum(0.5, 0.2, svd)
        d1 = conditional_score(ConditionalScoreInputs(np.array([1.0, 0.0]), x, 0.5, 0.2, svd, prior), part)
        d2 = conditional_score(ConditionalScoreInputs(np.array([-2.0, 3.0]), x, 0.5, 0.2, svd, prior), part)
        assert d1[1] == d2[1]
        assert d1[0] != d2[0]

    def test_prior_term_support(self):
        # measurement-dominated coordinates must ignore the prior entirely
        svd = diag_svd([1.0, 0.0])
        x = np.array([0.4, -0.7])
        y = np.array([1.0, 0.0])
        part = partition_spectrum(5.0, 0.2, svd)  # first coordinate dominated
        p1 = GaussianPrior(np.zeros(2), np.eye(2))
        p2 = GaussianPrior(np.full(2, 3.0), 0.1 * np.eye(2))
        d1 = conditional_score(ConditionalScoreInputs(y, x, 5.0, 0.2, svd, p1), part)
        d2 = conditional_score(ConditionalScoreInputs(y, x, 5.0, 0.2, svd, p2), part)
        assert d1[0] == d2[0]
        assert d1[1] != d2[1]

    def test_branchwise_equals_unified_matrix_form(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(2, 7))
            m = int(rng.integers(1, n + 1))
            vals = np.sort(rng.uniform(0, 1.5, min(m, n)))[::-1]
            vals[rng.random(vals.size) < 0.3] = 0.0
            h = np.zeros((m, n))
            h[np.arange(min(m, n)), np.arange(min(m, n))] = np.sort(vals)[::-1]
            svd = svd_decompose(LinearOperator(h))
            sigma_i = float(rng.uniform(0.05, 2.0))
            sigma0 = float(rng.uniform(0.0, 0.5))
            part = partition_spectrum(sigma_i, sigma0, svd)
            x_t = rng.standard_normal(n)
            y_t = rng.standard_normal(m)
            g_t = rng.standard_normal(n)
            w = measurement_weights(sigma_i, sigma0, svd, part)
            from snips.score import conditional_score_parts

            branch = conditional_score_parts(x_t, y_t, g_t, w, svd, part)
            unified = unified_reference(x_t, y_t, g_t, svd, part)
            np.testing.assert_allclose(branch, unified, rtol=1e-12, atol=1e-12)

    def test_nan_prior_propagates(self):
        class NanPrior:
            dim = 1

            def score(self, x, sigma):
                return np.array([np.nan])

        svd = diag_svd([1.0])
        inp = ConditionalScoreInputs(np.zeros(1), np.zeros(1), 1.0, 0.1, svd, NanPrior())
        with pytest.raises(ArithmeticError):
            conditional_score(inp, partition_spectrum(1.0, 0.1, svd))

    def test_dimension_validation(self):
        svd = diag_svd([1.0, 0.5])
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            ConditionalScoreInputs(np.zeros(3), np.zeros(2), 1.0, 0.1, svd, prior)
        with pytest.raises(ValueError):
            ConditionalScoreInputs(np.zeros(2), np.zeros(3), 1.0, 0.1, svd, prior)


class TestStepSizes:
    def test_silent_coordinate(self):
        svd = diag_svd([0.0])
        part = partition_spectrum(0.5, 0.1, svd)
        np.testing.assert_allclose(step_sizes(0.5, 0.1, svd, part).values, [0.25])

    def test_measurement_dominated(self):
        svd = diag_svd([1.0])
        part = partition_spectrum(0.5, 0.1, svd)
        np.testing.assert_allclose(step_sizes(0.5, 0.1, svd, part).values, [0.24])

    def test_positive_everywhere_off_boundary(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            vals = np.sort(rng.uniform(0, 2, 4))[::-1]
            vals[rng.random(4) < 0.25] = 0.0
            svd = diag_svd(vals)
            sigma_i = float(rng.uniform(0.01, 3.0))
            sigma0 = float(rng.uniform(0.0, 1.0))
            if np.any(np.abs(sigma_i * vals - sigma0) < 1e-12):
                continue
            part = partition_spectrum(sigma_i, sigma0, svd)
            assert np.all(step_sizes(sigma_i, sigma0, svd, part).values > 0)

    def test_continuity_at_the_boundary(self):
        s, sigma0 = 0.8, 0.2
        star = sigma0 / s
        svd = diag_svd([s])
        eps = 1e-9
        vals = []
        for sigma_i in (star * (1 + eps), star * (1 - eps)):
            part = partition_spectrum(sigma_i, sigma0, svd)
            vals.append(step_sizes(sigma_i, sigma0, svd, part).values[0])
        assert abs(vals[0] - vals[1]) <= 1e-8

    def test_boundary_floor_and_warning(self):
        svd = diag_svd([1.0])
        part = partition_spectrum(0.1, 0.1, svd)  # exact boundary -> "less"
        with pytest.warns(BoundaryWarning):
            alpha = step_sizes(0.1, 0.1, svd, part)
        assert alpha.floor_hits == 1
        np.testing.assert_allclose(alpha.values, [1e-12 * 0.01])

    def test_matches_finite_difference_curvature(self):
        # near-point prior so the frozen-denoiser premise is exact
        rng = np.random.default_rng(4)
        for s, sigma_i, sigma0 in [(0.0, 0.4, 0.2), (1.2, 0.9, 0.2), (0.7, 0.1, 0.2)]:
            svd = diag_svd([s])
            prior = GaussianPrior(np.array([0.3]), np.array([[1e-9]]))
            y = np.array([float(rng.uniform(-0.5, 0.5))])
            part = partition_spectrum(sigma_i, sigma0, svd)
            alpha = step_sizes(sigma_i, sigma0, svd, part).values[0]
            cond = exact_conditional_gaussian(prior, svd, sigma_i, sigma0, y)
            x0 = float(cond.mean[0]) + 0.02
            h = 1e-4
            f = lambda v: cond.logpdf(np.array([v]))  # noqa: E731
            hess = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / (h * h)
            assert abs(alpha * (-hess) - 1.0) <= 1e-4


class TestMeasurementWeights:
    def test_zero_on_silent_coordinates(self):
        svd = diag_svd([1.0, 0.0])
        part = partition_spectrum(1.0, 0.1, svd)
        w = measurement_weights(1.0, 0.1, svd, part)
        assert w[1] == 0.0 and w[0] > 0

    def test_boundary_cap_with_warning(self):
        svd = diag_svd([1.0])
        part = partition_spectrum(0.1, 0.1, svd)
        with pytest.warns(BoundaryWarning):
            w = measurement_weights(0.1, 0.1, svd, part)
        np.testing.assert_allclose(w[0], 1e14, rtol=1e-12)
