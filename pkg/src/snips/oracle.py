"""Independent ground-truth machinery for verifying the sampler.

Four tools live here, all deliberately written along different routes than
the production code they check:

* ``exact_gaussian_posterior`` / ``gaussian_posterior_schur``: the posterior
  of a Gaussian prior under a linear measurement, via the precision form and
  via joint-Gaussian conditioning. Agreement of the two is itself a test.
* ``carve_noise_sequence``: the annealing-noise construction in which the
  layers injected while the scaled annealing noise exceeds the measurement
  noise are portions of the measurement noise itself. Produces per-level
  noise vectors in the V-domain whose coupling to U^T z obeys the two-branch
  variance law that the conditional score relies on.
* ``exact_conditional_gaussian``: for a Gaussian prior, the conditional
  distribution of V^T (x + n_i) given U^T y under the carved construction,
  in closed form. Its score and log density anchor the conditional-score and
  step-size checks.
* ``conditional_score_bruteforce``: dense quadrature over the carved joint
  density for 1-D and 2-D mixture priors, differentiated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import LinearOperator, DegradationSVD
from .priors import GaussianPrior, GmmPrior
from .schedule import NoiseSchedule, validate_crossing

_PSD_CLIP = 1e-10


class CarvingError(RuntimeError):
    """The schedule/operator pair does not admit the carved construction."""


@dataclass(frozen=True)
class GaussianPosterior:
    """Mean and covariance of a Gaussian conditional distribution."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        eigvals, eigvecs = np.linalg.eigh(cov)
        if eigvals.min() < -_PSD_CLIP:
            raise ValueError(f"covariance not PSD: min eigenvalue {eigvals.min():.3e}")
        eigvals = np.clip(eigvals, 0.0, None)
        cov = (eigvecs * eigvals) @ eigvecs.T
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        eigvals, eigvecs = np.linalg.eigh(self.covariance)
        root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        return self.mean + rng.standard_normal((size, self.dim)) @ root.T

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the log density at x (requires positive definiteness)."""
        fac = cho_factor(self.covariance, lower=True)
        return -cho_solve(fac, np.asarray(x, dtype=np.float64) - self.mean)

    def logpdf(self, x: np.ndarray) -> float:
        fac = cho_factor(self.covariance, lower=True)
        delta = np.asarray(x, dtype=np.float64) - self.mean
        quad = float(delta @ cho_solve(fac, delta))
        logdet = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
        return -0.5 * (quad + logdet + self.dim * np.log(2.0 * np.pi))


def exact_gaussian_posterior(
    prior: GaussianPrior, op: LinearOperator, sigma0: float, y: np.ndarray
) -> GaussianPosterior:
    """Posterior of x given y = H x + noise(sigma0), precision form.

    covariance = (C^-1 + H^T H / sigma0^2)^-1 and
    mean = covariance (C^-1 mu + H^T y / sigma0^2), both via symmetric solves.
    A zero operator returns the prior; sigma0 = 0 needs full column rank and
    collapses to the least-squares point.
    """
    y = np.asarray(y, dtype=np.float64)
    h = op.matrix
    if not np.any(h):
        return GaussianPosterior(prior.mean.copy(), prior.covariance.copy())
    if sigma0 == 0.0:
        if np.linalg.matrix_rank(h) < op.cols:
            raise ValueError("sigma0 = 0 requires a full column rank operator")
        mean, *_ = np.linalg.lstsq(h, y, rcond=None)
        return GaussianPosterior(mean, np.zeros((op.cols, op.cols)))
    prior_fac = cho_factor(prior.covariance, lower=True)
    precision = cho_solve(prior_fac, np.eye(prior.dim)) + (h.T @ h) / (sigma0 * sigma0)
    post_fac = cho_factor(precision, lower=True)
    covariance = cho_solve(post_fac, np.eye(prior.dim))
    rhs = cho_solve(prior_fac, prior.mean) + (h.T @ y) / (sigma0 * sigma0)
    mean = cho_solve(post_fac, rhs)
    return GaussianPosterior(mean, covariance)


def gaussian_posterior_schur(
    prior: GaussianPrior, op: LinearOperator, sigma0: float, y: np.ndarray
) -> GaussianPosterior:
    """Same posterior through joint-Gaussian conditioning; cross-check route."""
    y = np.asarray(y, dtype=np.float64)
    h = op.matrix
    cross = prior.covariance @ h.T
    yy = h @ cross + sigma0 * sigma0 * np.eye(op.rows)
    gain = np.linalg.solve(yy, cross.T).T
    mean = prior.mean + gain @ (y - h @ prior.mean)
    covariance = prior.covariance - gain @ cross.T
    return GaussianPosterior(mean, covariance)


@dataclass(frozen=True)
class CarvedNoise:
    """Per-level annealing noise in the V-domain, rows indexed by level.

    n[i] is V^T (noise at level i+1), each coordinate with variance
    sigma_{i+1}^2. Layer increments are n[i] - n[i+1] (with an implicit zero
    row past the end). For a batch input z of shape (B, M) the array is
    (B, L, N).
    """

    n: np.ndarray
    z_t: np.ndarray


def carve_noise_sequence(
    z: np.ndarray, schedule: NoiseSchedule, svd: DegradationSVD, seed
) -> CarvedNoise:
    """Build annealing noise whose scaled coordinates are carved from U^T z.

    For a coordinate with singular value s > 0 write v_i = s^2 sigma_i^2 and
    track b_i = s * (V^T n_i)_j. Levels with v_i <= sigma0^2 interpolate a
    Brownian bridge from 0 at variance-time 0 to z_T at variance-time
    sigma0^2, so b_i is literally a portion of z_T. The first level past the
    boundary receives the remaining portion z_T - b plus fresh noise of
    variance v_i - sigma0^2; higher levels accumulate independent
    increments. Coordinates with s = 0 are built from independent increments
    only. Consequently

        Var(b_i - z_T) = v_i - sigma0^2      where v_i > sigma0^2,
        Var(b_i - z_T) = sigma0^2 - v_i      where v_i <= sigma0^2,

    and in the second branch the difference is independent of b_i.
    """
    report = validate_crossing(schedule, svd)
    if not report.ok:
        bad = "; ".join(e.reason for e in report.failures()[:3])
        raise CarvingError(f"carving needs a crossing for every nonzero singular: {bad}")
    z = np.asarray(z, dtype=np.float64)
    batched = z.ndim == 2
    zb = z if batched else z[None, :]
    if zb.shape[1] != svd.m:
        raise ValueError(f"z must have {svd.m} entries, got shape {z.shape}")
    b_count = zb.shape[0]
    levels = schedule.levels
    big_l = levels.size
    n_dim = svd.n
    s = svd.extended_singulars
    sigma0sq = schedule.sigma0 ** 2
    rng = np.random.default_rng(seed)

    z_t = zb @ svd.u  # rows of U^T z
    zero_mask = s == 0.0
    pos = ~zero_mask
    z_t_pos = np.zeros((b_count, n_dim))
    k = min(svd.m, n_dim)
    z_t_pos[:, :k] = z_t[:, :k]

    out = np.empty((b_count, big_l, n_dim))
    # variance-time per coordinate and level: s_j^2 sigma_i^2 for carved
    # coordinates, plain sigma_i^2 for the unscaled zero-spectrum ones
    v = (levels[:, None] ** 2) * np.where(pos, s * s, 1.0)[None, :]
    b = np.zeros((b_count, n_dim))  # running value of s_j * (V^T n_i)_j
    v_prev = np.zeros(n_dim)  # variance-time already consumed, per coordinate
    crossed = np.zeros(n_dim, dtype=bool)  # boundary handled for this coordinate
    for i in range(big_l - 1, -1, -1):
        vi = v[i]
        inside = pos & ~crossed & (vi <= sigma0sq)
        crossing = pos & ~crossed & (vi > sigma0sq)
        independent = zero_mask | (pos & crossed & (vi > sigma0sq))
        if inside.any():
            dv = vi[inside] - v_prev[inside]
            remain = sigma0sq - v_prev[inside]
            frac = np.where(remain > 0, dv / np.where(remain > 0, remain, 1.0), 0.0)
            var = np.where(remain > 0, dv * (sigma0sq - vi[inside]) / remain, 0.0)
            b[:, inside] += (z_t_pos[:, inside] - b[:, inside]) * frac
            b[:, inside] += rng.standard_normal((b_count, int(inside.sum()))) * np.sqrt(var)
            v_prev[inside] = vi[inside]
        if crossing.any():
            var = vi[crossing] - sigma0sq
            b[:, crossing] = z_t_pos[:, crossing]
            b[:, crossing] += rng.standard_normal((b_count, int(crossing.sum()))) * np.sqrt(var)
            v_prev[crossing] = vi[crossing]
            crossed[crossing] = True
        if independent.any():
            dv = vi[independent] - v_prev[independent]
            b[:, independent] += rng.standard_normal(
                (b_count, int(independent.sum()))
            ) * np.sqrt(dv)
            v_prev[independent] = vi[independent]
        row = np.where(pos, b / np.where(pos, s, 1.0), b)
        out[:, i, :] = row
    carved = CarvedNoise(n=out if batched else out[0], z_t=z_t if batched else z_t[0])
    return carved


def exact_conditional_gaussian(
    prior: GaussianPrior,
    svd: DegradationSVD,
    sigma_i: float,
    sigma0: float,
    y: np.ndarray,
) -> GaussianPosterior:
    """Conditional law of V^T (x + n_i) given U^T y, Gaussian prior, carved noise.

    Assembled from the joint second moments: with C_T = V^T C V, the carved
    coupling contributes E[(V^T n)_j (U^T z)_j] = min(s_j^2 sigma_i^2,
    sigma0^2) / s_j on coordinates with s_j > 0. Everything is exact; no
    score-side code is reused.
    """
    y = np.asarray(y, dtype=np.float64)
    n, m = svd.n, svd.m
    k = min(m, n)
    s = svd.extended_singulars
    c_t = svd.v.T @ prior.covariance @ svd.v
    mu_t = svd.v.T @ prior.mean
    sig_full = np.zeros((m, n))
    sig_full[np.arange(k), np.arange(k)] = s[:k]

    var_x = c_t + sigma_i * sigma_i * np.eye(n)
    var_y = sig_full @ c_t @ sig_full.T + sigma0 * sigma0 * np.eye(m)
    cross = c_t @ sig_full.T
    coupling = np.zeros((n, m))
    for j in range(k):
        if s[j] > 0:
            coupling[j, j] = min(s[j] * s[j] * sigma_i * sigma_i, sigma0 * sigma0) / s[j]
    cross = cross + coupling

    y_t = svd.u.T @ y
    gain = np.linalg.solve(var_y, cross.T).T
    mean = mu_t + gain @ (y_t - sig_full @ mu_t)
    covariance = var_x - gain @ cross.T
    return GaussianPosterior(mean, covariance)


def _mixture_pdf_1d(prior: GmmPrior, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for w, comp in zip(prior.weights, prior.components):
        var = comp.covariance[0, 0]
        out += w * np.exp(-0.5 * (x - comp.mean[0]) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return out


def _min_component_std(prior: GmmPrior) -> float:
    return min(np.sqrt(np.linalg.eigvalsh(c.covariance).min()) for c in prior.components)


def _quad_axis(prior: GmmPrior, sigma_i: float, sigma0: float, step: float, dim: int):
    means = np.array([c.mean[dim] for c in prior.components])
    spread = max(np.sqrt(np.linalg.eigvalsh(c.covariance).max()) for c in prior.components)
    combined = np.sqrt(spread**2 + sigma_i**2 + sigma0**2)
    lo = means.min() - 6.0 * combined
    hi = means.max() + 6.0 * combined
    return np.arange(lo, hi + step, step)


def _norm_pdf(x, var):
    return np.exp(-0.5 * x * x / var) / np.sqrt(2 * np.pi * var)


def conditional_score_bruteforce(
    prior: GmmPrior,
    s: float,
    sigma_i: float,
    sigma0: float,
    y_t: float,
    points: np.ndarray,
    step: float | None = None,
) -> np.ndarray:
    """Reference conditional score by dense quadrature plus central differences.

    Supports priors of dimension 1 or 2; with dimension 2 the measurement
    touches the first coordinate only (singular values (s, 0)), which is the
    smallest setting where the prior couples measured and unmeasured
    coordinates. The joint density of (noisy iterate, measurement) is
    assembled from the carved-noise factorization and integrated over the
    clean signal on a uniform grid, then the log is differenced. Refuses
    grids coarser than sigma_i / 10.
    """
    dim = prior.dim
    if dim not in (1, 2):
        raise ValueError(f"brute force supports dim 1 or 2, got {dim}")
    if s <= 0:
        raise ValueError("s must be positive")
    vi = s * s * sigma_i * sigma_i
    if vi == sigma0 * sigma0:
        raise ValueError("exact boundary sigma_i * s = sigma0 has a degenerate density")
    if step is None:
        step = min(sigma_i, sigma0 if sigma0 > 0 else sigma_i, _min_component_std(prior)) / 10.0
    if step > sigma_i / 10.0:
        raise ValueError(f"grid step {step} too coarse; need <= sigma_i/10 = {sigma_i / 10}")
    fd = step / 10.0

    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != dim:
        raise ValueError(f"points must be (P, {dim})")

    greater = vi > sigma0 * sigma0

    if dim == 1:
        grid = _quad_axis(prior, sigma_i, sigma0, step, 0)
        px = _mixture_pdf_1d(prior, grid)

        def logp(xt: float) -> float:
            if greater:
                like = px * _norm_pdf(y_t - s * grid, sigma0 * sigma0)
                total = np.trapezoid(like, grid)
                return float(np.log(_norm_pdf(xt - y_t / s, (vi - sigma0**2) / s**2)) + np.log(total))
            blur = px * _norm_pdf(xt - grid, sigma_i * sigma_i)
            total = np.trapezoid(blur, grid)
            return float(np.log(total) + np.log(_norm_pdf(y_t - s * xt, sigma0**2 - vi)))

        out = np.empty(points.shape[0])
        for p, (xt,) in enumerate(points):
            out[p] = (logp(xt + fd) - logp(xt - fd)) / (2 * fd)
        return out

    # dim == 2: coordinate 0 measured with singular value s, coordinate 1 unmeasured
    g0 = _quad_axis(prior, sigma_i, sigma0, step, 0)
    g1 = _quad_axis(prior, sigma_i, sigma0, step, 1)
    xx0, xx1 = np.meshgrid(g0, g1, indexing="ij")
    pts = np.stack([xx0.ravel(), xx1.ravel()], axis=1)
    log_px = prior.log_marginal(pts, 0.0).reshape(xx0.shape)
    px = np.exp(log_px)

    def logp2(xt0: float, xt1: float) -> float:
        blur1 = _norm_pdf(xt1 - xx1, sigma_i * sigma_i)
        if greater:
            inner = px * _norm_pdf(y_t - s * xx0, sigma0 * sigma0) * blur1
            total = np.trapezoid(np.trapezoid(inner, g1, axis=1), g0)
            return float(np.log(total) + np.log(_norm_pdf(xt0 - y_t / s, (vi - sigma0**2) / s**2)))
        inner = px * _norm_pdf(xt0 - xx0, sigma_i * sigma_i) * blur1
        total = np.trapezoid(np.trapezoid(inner, g1, axis=1), g0)
        return float(np.log(total) + np.log(_norm_pdf(y_t - s * xt0, sigma0**2 - vi)))

    out = np.empty((points.shape[0], 2))
    for p, (xt0, xt1) in enumerate(points):
        out[p, 0] = (logp2(xt0 + fd, xt1) - logp2(xt0 - fd, xt1)) / (2 * fd)
        out[p, 1] = (logp2(xt0, xt1 + fd) - logp2(xt0, xt1 - fd)) / (2 * fd)
    return out
