"""Conditional score of the V-transformed posterior and per-coordinate step
sizes.

Work happens in the SVD domain: x_t = V^T x, y_t = U^T y. The measurement
residual y_t - Sigma x_t couples to each coordinate independently, so the
conditional score splits per coordinate j according to the spectrum
partition:

  zero      d_j = (V^T prior_score)_j
  greater   d_j = s_j * r_j / (sigma_i^2 s_j^2 - sigma0^2)
  less      d_j = s_j * r_j / (sigma0^2 - sigma_i^2 s_j^2) + (V^T prior_score)_j

with r = y_t - Sigma x_t. Because Sigma is diagonal, the pseudo-inverse of
|sigma0^2 I - sigma_i^2 Sigma Sigma^T| reduces to per-entry reciprocals and
no N x N matrix is ever built.

The step sizes are the negative inverse of a diagonal Hessian approximation
of the conditional log posterior (the denoiser Jacobian is treated as
negligible):

  zero      sigma_i^2
  greater   sigma_i^2 - sigma0^2 / s_j^2
  less      sigma_i^2 * (1 - s_j^2 sigma_i^2 / sigma0^2)

Exactly on the boundary sigma_i * s_j = sigma0 the measurement variance
vanishes; the measurement weight is capped and the step size floored, each
with a BoundaryWarning, instead of dividing by zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .operators import DegradationSVD
from .priors import ScoreModel
from .schedule import SpectrumPartition

_STEP_FLOOR_FACTOR = 1e-12
_WEIGHT_CAP_FACTOR = 1e-12


class BoundaryWarning(RuntimeWarning):
    """Emitted when sigma_i * s_j hits sigma0 exactly and a guard engages."""


@dataclass(frozen=True)
class ConditionalScoreInputs:
    """Bundle of everything the conditional score needs.

    y_t is the rotated measurement U^T y (length M); x is the current
    iterate in signal space (length N).
    """

    y_t: np.ndarray
    x: np.ndarray
    sigma_i: float
    sigma0: float
    svd: DegradationSVD
    prior: ScoreModel

    def __post_init__(self):
        y_t = np.asarray(self.y_t, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if y_t.shape != (self.svd.m,):
            raise ValueError(f"y_t must have length {self.svd.m}, got {y_t.shape}")
        if x.shape != (self.svd.n,):
            raise ValueError(f"x must have length {self.svd.n}, got {x.shape}")
        if self.prior.dim != self.svd.n:
            raise ValueError(f"prior dim {self.prior.dim} != operator cols {self.svd.n}")
        object.__setattr__(self, "y_t", y_t)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class StepSizeVector:
    """Diagonal of the per-coordinate step size matrix, plus guard count."""

    values: np.ndarray
    floor_hits: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("step sizes must be strictly positive")
        object.__setattr__(self, "values", v)


def measurement_weights(
    sigma_i: float, sigma0: float, svd: DegradationSVD, partition: SpectrumPartition
) -> np.ndarray:
    """Per-coordinate multiplier w_j applied to the residual r_j.

    Length N; zero on zero-spectrum coordinates. On greater coordinates
    w_j = s_j / (sigma_i^2 s_j^2 - sigma0^2), on less coordinates
    w_j = s_j / (sigma0^2 - sigma_i^2 s_j^2), capped at the exact boundary.
    """
    s = svd.extended_singulars
    w = np.zeros(svd.n)
    denom = np.abs(sigma0 * sigma0 - sigma_i * sigma_i * s * s)
    nonzero = s > 0
    cap = 1.0 / (_WEIGHT_CAP_FACTOR * max(sigma0 * sigma0, sigma_i * sigma_i))
    with np.errstate(divide="ignore"):
        raw = np.where(nonzero & (denom > 0), s / np.where(denom > 0, denom, 1.0), 0.0)
    boundary = nonzero & (denom == 0)
    if boundary.any():
        warnings.warn(
            f"{int(boundary.sum())} coordinate(s) exactly on sigma_i*s = sigma0; "
            "capping measurement weight",
            BoundaryWarning,
            stacklevel=2,
        )
        raw = np.where(boundary, cap, raw)
    over = raw > cap
    if over.any():
        raw = np.where(over, cap, raw)
    w[nonzero] = raw[nonzero]
    return w


def conditional_score_parts(
    x_t: np.ndarray,
    y_t: np.ndarray,
    prior_score_t: np.ndarray,
    weights: np.ndarray,
    svd: DegradationSVD,
    partition: SpectrumPartition,
) -> np.ndarray:
    """Combine precomputed pieces into the conditional score (V-domain).

    x_t is the iterate in the V-domain, prior_score_t the V-rotated prior
    score, weights the output of ``measurement_weights``. Both may carry
    leading batch axes. Shared by the public entry point and the sampler's
    inner loop so both always evaluate the same arithmetic.
    """
    n, m = svd.n, svd.m
    k = min(m, n)
    d = np.zeros(np.broadcast_shapes(x_t.shape, prior_score_t.shape))
    d[..., :k] = weights[:k] * (y_t[..., :k] - svd.extended_singulars[:k] * x_t[..., :k])
    keep_prior = np.ones(n, dtype=bool)
    keep_prior[partition.greater] = False
    d[..., keep_prior] += prior_score_t[..., keep_prior]
    return d


def conditional_score(inp: ConditionalScoreInputs, partition: SpectrumPartition) -> np.ndarray:
    """Score of the conditional distribution of V^T x given U^T y, length N."""
    svd = inp.svd
    g = np.asarray(inp.prior.score(inp.x, inp.sigma_i), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ArithmeticError("prior score returned non-finite values")
    g_t = svd.v.T @ g
    x_t = svd.v.T @ inp.x
    w = measurement_weights(inp.sigma_i, inp.sigma0, svd, partition)
    return conditional_score_parts(x_t, inp.y_t, g_t, w, svd, partition)


def step_sizes(
    sigma_i: float, sigma0: float, svd: DegradationSVD, partition: SpectrumPartition
) -> StepSizeVector:
    """Per-coordinate Langevin step sizes for one annealing level."""
    if sigma_i <= 0:
        raise ValueError(f"sigma_i must be positive, got {sigma_i}")
    s = svd.extended_singulars
    si2 = sigma_i * sigma_i
    values = np.full(svd.n, si2)
    g = partition.greater
    values[g] = si2 - sigma0 * sigma0 / (s[g] * s[g])
    l = partition.less
    values[l] = si2 * (1.0 - s[l] * s[l] * si2 / (sigma0 * sigma0))
    floor = _STEP_FLOOR_FACTOR * si2
    hits = int(np.sum(values < floor))
    if hits:
        warnings.warn(
            f"{hits} step size(s) at or below the boundary floor; clamping",
            BoundaryWarning,
            stacklevel=2,
        )
        values = np.maximum(values, floor)
    return StepSizeVector(values=values, floor_hits=hits)
