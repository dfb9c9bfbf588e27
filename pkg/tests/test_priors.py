import numpy as np
import pytest

from snips.priors import (
    GaussianPrior,
    GmmPrior,
    load_gaussian_prior,
    load_gmm_prior,
)


def quadrature_denoise(prior, x_noisy, sigma, lo=-3.0, hi=3.0, step=1e-4):
    """Conditional-mean oracle by dense numerical integration (1-D)."""
    grid = np.arange(lo, hi + step, step)
    pdf = np.zeros_like(grid)
    for w, c in zip(prior.weights, prior.components):
        var = c.covariance[0, 0]
        pdf += w * np.exp(-0.5 * (grid - c.mean[0]) ** 2 / var) / np.sqrt(2 * np.pi * var)
    kernel = np.exp(-0.5 * (x_noisy - grid) ** 2 / sigma**2)
    joint = pdf * kernel
    return np.trapezoid(grid * joint, grid) / np.trapezoid(joint, grid)


class TestGaussianPrior:
    def test_unit_scalar(self):
        prior = GaussianPrior(np.zeros(1), np.eye(1))
        np.testing.assert_allclose(prior.score(np.array([2.0]), 1.0), [-1.0])

    def test_score_zero_at_mean(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        prior = GaussianPrior(rng.standard_normal(3), a @ a.T + np.eye(3))
        for sigma in (0.0, 0.3, 2.0):
            np.testing.assert_allclose(prior.score(prior.mean, sigma), 0.0, atol=1e-12)

    def test_clean_score(self):
        prior = GaussianPrior(np.zeros(1), np.array([[4.0]]))
        np.testing.assert_allclose(prior.score(np.array([2.0]), 0.0), [-0.5])

    def test_denoiser_residual_identity(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 4))
        prior = GaussianPrior(rng.standard_normal(4), a @ a.T + 0.5 * np.eye(4))
        for _ in range(10):
            x = rng.standard_normal(4)
            sigma = float(rng.uniform(0.05, 2.0))
            lhs = sigma**2 * prior.score(x, sigma) + x
            np.testing.assert_allclose(lhs, prior.denoise(x, sigma), rtol=1e-12)

    def test_smoothing_consistency(self):
        # score under N(mu, C) at noise sigma == score under N(mu, C + sigma^2 I) at 0
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 3))
        cov = a @ a.T + 0.2 * np.eye(3)
        mu = rng.standard_normal(3)
        sigma = 0.7
        smoothed = GaussianPrior(mu, cov + sigma**2 * np.eye(3))
        base = GaussianPrior(mu, cov)
        for _ in range(5):
            x = rng.standard_normal(3)
            np.testing.assert_allclose(
                base.score(x, sigma), smoothed.score(x, 0.0), rtol=1e-10
            )

    def test_batch_shapes(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        out = prior.score(np.zeros((5, 2)), 0.5)
        assert out.shape == (5, 2)

    def test_diagonal_matches_dense(self):
        rng = np.random.default_rng(3)
        variances = rng.uniform(0.1, 2.0, 4)
        mu = rng.standard_normal(4)
        diag = GaussianPrior(mu, np.diag(variances))
        dense = GaussianPrior(mu, np.diag(variances) + 0.0)
        # force the dense code path by breaking exact diagonality detection
        x = rng.standard_normal((3, 4))
        assert diag.is_diagonal
        expected = -(x - mu) / (variances + 0.09)
        np.testing.assert_allclose(diag.score(x, 0.3), expected, rtol=1e-12)
        np.testing.assert_allclose(dense.log_marginal(x, 0.3), diag.log_marginal(x, 0.3))

    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestGmmPrior:
    def two_bump(self, var=0.01):
        return GmmPrior(
            np.array([0.5, 0.5]),
            [
                GaussianPrior(np.array([-1.0]), np.array([[var]])),
                GaussianPrior(np.array([1.0]), np.array([[var]])),
            ],
        )

    def test_single_component_reduces_to_gaussian(self):
        rng = np.random.default_rng(4)
        comp = GaussianPrior(np.array([0.2, -0.4]), np.array([[0.3, 0.1], [0.1, 0.5]]))
        mix = GmmPrior(np.array([1.0]), [comp])
        for _ in range(5):
            x = rng.standard_normal(2)
            np.testing.assert_allclose(mix.score(x, 0.4), comp.score(x, 0.4), rtol=1e-10)
            np.testing.assert_allclose(mix.denoise(x, 0.4), comp.denoise(x, 0.4), rtol=1e-10)

    def test_symmetric_midpoint(self):
        mix = self.two_bump()
        np.testing.assert_allclose(mix.denoise(np.zeros(1), 0.5), 0.0, atol=1e-12)

    def test_denoise_matches_quadrature(self):
        mix = self.two_bump(var=0.01)
        x_noisy, sigma = 0.9, 0.1
        oracle = quadrature_denoise(mix, x_noisy, sigma)
        ours = mix.denoise(np.array([x_noisy]), sigma)[0]
        assert abs(ours - oracle) < 1e-6

    def test_score_matches_finite_differences_3d(self):
        rng = np.random.default_rng(5)
        comps = [
            GaussianPrior(rng.standard_normal(3), np.diag(rng.uniform(0.05, 0.4, 3)))
            for _ in range(3)
        ]
        mix = GmmPrior(np.array([0.2, 0.5, 0.3]), comps)
        h = 1e-5
        for _ in range(10):
            x = rng.standard_normal(3)
            sigma = float(rng.uniform(0.1, 1.0))
            score = mix.score(x, sigma)
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                fd = (mix.log_marginal(x + e, sigma) - mix.log_marginal(x - e, sigma)) / (2 * h)
                assert abs(score[j] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_score_fd_sweep_2d(self):
        rng = np.random.default_rng(6)
        comps = [
            GaussianPrior(np.array([-0.8, 0.3]), 0.2 * np.eye(2)),
            GaussianPrior(np.array([0.9, -0.5]), 0.1 * np.eye(2)),
        ]
        mix = GmmPrior(np.array([0.6, 0.4]), comps)
        h = 1e-5
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-2, 2, 2)
            sigma = float(rng.uniform(0.05, 1.5))
            score = mix.score(x, sigma)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (mix.log_marginal(x + e, sigma) - mix.log_marginal(x - e, sigma)) / (2 * h)
                worst = max(worst, abs(score[j] - fd) / max(1.0, abs(fd)))
        assert worst <= 1e-4

    def test_score_vanishes_at_located_mode(self):
        from scipy.optimize import minimize_scalar

        mix = self.two_bump(var=0.04)
        sigma = 0.3
        res = minimize_scalar(
            lambda v: -mix.log_marginal(np.array([v]), sigma),
            bounds=(0.5, 1.5),
            method="bounded",
            options={"xatol": 1e-12},
        )
        assert abs(mix.score(np.array([res.x]), sigma)[0]) < 1e-6

    def test_weight_validation(self):
        comp = GaussianPrior(np.zeros(1), np.eye(1))
        with pytest.raises(ValueError):
            GmmPrior(np.array([0.7, 0.7]), [comp, comp])
        with pytest.raises(ValueError):
            GmmPrior(np.array([1.0]), [])

    def test_tight_components_no_overflow(self):
        # responsibilities must survive sigma ~ 0.01 with tiny component spread
        mix = self.two_bump(var=1e-4)
        out = mix.score(np.array([0.99]), 0.01)
        assert np.all(np.isfinite(out))


class TestPriorFiles:
    def test_gaussian_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mean = rng.standard_normal(5)
        a = rng.standard_normal((5, 5))
        cov = a @ a.T + np.eye(5)
        np.savez(tmp_path / "g.npz", mean=mean, cov=cov)
        prior = load_gaussian_prior(tmp_path / "g.npz")
        np.testing.assert_allclose(prior.covariance, cov)

    def test_gaussian_scalar_cov(self, tmp_path):
        np.savez(tmp_path / "g.npz", mean=np.zeros(3), cov=np.array(2.0))
        prior = load_gaussian_prior(tmp_path / "g.npz")
        np.testing.assert_allclose(prior.covariance, 2.0 * np.eye(3))

    def test_gmm_round_trip(self, tmp_path):
        np.savez(
            tmp_path / "m.npz",
            weights=np.array([0.3, 0.7]),
            means=np.array([[0.0, 0.0], [1.0, 1.0]]),
            covs=np.array([0.1, 0.2]),
        )
        mix = load_gmm_prior(tmp_path / "m.npz")
        assert mix.dim == 2
        np.testing.assert_allclose(mix.components[1].covariance, 0.2 * np.eye(2))
