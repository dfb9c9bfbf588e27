"""Faithfulness diagnostics for reconstructions, plus PSNR bookkeeping.

A reconstruction x_hat of a measurement y = H x + noise(sigma0) is faithful
when the residual y - H x_hat behaves like white Gaussian noise of standard
deviation sigma0. ``faithfulness`` checks three things: the empirical
residual std against sigma0 (5% band), an omnibus normality test combining
skewness and kurtosis z-scores into a chi-square statistic with two degrees
of freedom, and the Pearson correlation of neighboring residual entries in
raster order (|rho| < 0.1 band). Multichannel residuals are flattened.

The normality statistic is implemented here with the standard normalizing
constants; the test suite calibrates its rejection rate under the null and
cross-checks it against scipy's implementation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .operators import LinearOperator

MIN_NORMALITY_SAMPLES = 20


def skewness_zscore(x: np.ndarray) -> np.ndarray:
    """Transformed sample skewness, ~N(0,1) under normality. Batched on axis -1."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 8:
        raise ValueError(f"skewness z-score needs n >= 8, got {n}")
    centered = x - x.mean(axis=-1, keepdims=True)
    m2 = np.mean(centered**2, axis=-1)
    m3 = np.mean(centered**3, axis=-1)
    g1 = m3 / m2**1.5
    y = g1 * np.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = (
        3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0))
    )
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    y = np.where(y == 0, 1e-300, y)  # keep log argument positive at exactly zero
    return delta * np.log(y / alpha + np.sqrt((y / alpha) ** 2 + 1.0))


def kurtosis_zscore(x: np.ndarray) -> np.ndarray:
    """Transformed sample kurtosis, ~N(0,1) under normality. Batched on axis -1."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 8:
        raise ValueError(f"kurtosis z-score needs n >= 8, got {n}")
    centered = x - x.mean(axis=-1, keepdims=True)
    m2 = np.mean(centered**2, axis=-1)
    m4 = np.mean(centered**4, axis=-1)
    b2 = m4 / (m2 * m2)
    mean_b2 = 3.0 * (n - 1.0) / (n + 1.0)
    var_b2 = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0))
    xx = (b2 - mean_b2) / np.sqrt(var_b2)
    sqrt_beta1 = (
        6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * np.sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0)))
    )
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1**2))
    term = (1.0 - 2.0 / a) / (1.0 + xx * np.sqrt(2.0 / (a - 4.0)))
    term = np.sign(term) * np.abs(term) ** (1.0 / 3.0)
    return (1.0 - 2.0 / (9.0 * a) - term) / np.sqrt(2.0 / (9.0 * a))


def dagostino_k2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Omnibus normality statistic and its p-value. Batched on axis -1.

    K2 = Z_skew^2 + Z_kurt^2 is chi-square with 2 degrees of freedom under
    the null, so the p-value is exp(-K2 / 2).
    """
    z1 = skewness_zscore(x)
    z2 = kurtosis_zscore(x)
    k2 = z1 * z1 + z2 * z2
    return k2, np.exp(-0.5 * k2)


@dataclass(frozen=True)
class FaithfulnessReport:
    residual_std: float
    dagostino_pvalue: float
    neighbor_rho: float
    pass_std: bool
    pass_normality: bool
    pass_rho: bool
    normality_applicable: bool = True
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=True)


def reports_to_csv(reports: list[FaithfulnessReport]) -> str:
    fields = list(asdict(reports[0]).keys()) if reports else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(asdict(r))
    return buf.getvalue()


def faithfulness(
    op: LinearOperator, x_hat: np.ndarray, y: np.ndarray, sigma0: float
) -> FaithfulnessReport:
    """Diagnose the residual y - H x_hat against the measurement noise model."""
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x_hat.size != op.cols or y.size != op.rows:
        raise ValueError(
            f"shape mismatch: operator {op.rows}x{op.cols}, "
            f"x_hat {x_hat.size}, y {y.size}"
        )
    return residual_faithfulness(y - op.apply(x_hat), sigma0)


def residual_faithfulness(residual: np.ndarray, sigma0: float) -> FaithfulnessReport:
    """Faithfulness battery on an already-computed (flattened) residual."""
    r = np.asarray(residual, dtype=np.float64).ravel()
    m = r.size
    std = float(np.std(r, ddof=1)) if m > 1 else 0.0
    if std == 0.0:
        return FaithfulnessReport(
            residual_std=0.0,
            dagostino_pvalue=0.0,
            neighbor_rho=0.0,
            pass_std=sigma0 == 0.0,
            pass_normality=False,
            pass_rho=False,
            normality_applicable=False,
            degenerate=True,
        )
    if sigma0 > 0:
        pass_std = abs(std / sigma0 - 1.0) <= 0.05
    else:
        pass_std = False
    applicable = m >= MIN_NORMALITY_SAMPLES
    if applicable:
        _, pvalue = dagostino_k2(r)
        pvalue = float(pvalue)
        pass_normality = pvalue > 0.05
    else:
        pvalue = float("nan")
        pass_normality = False
    a, b = r[:-1], r[1:]
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    rho = float(da @ db) / denom if denom > 0 else 0.0
    return FaithfulnessReport(
        residual_std=std,
        dagostino_pvalue=pvalue,
        neighbor_rho=rho,
        pass_std=pass_std,
        pass_normality=pass_normality,
        pass_rho=abs(rho) < 0.1,
        normality_applicable=applicable,
    )


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range signals.

    10 * log10(1 / MSE); identical inputs return +inf.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def sample_vs_mean_gap(samples, ref: np.ndarray) -> dict:
    """PSNR of individual samples versus the PSNR of their pixelwise mean.

    Averaging K independent posterior samples reduces the error variance, so
    the mean image scores higher; the gap approaches 10*log10(K) dB when the
    samples are independent noise around the reference.
    """
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    if stack.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    per_sample = [psnr(s, ref) for s in stack]
    mean_psnr = psnr(stack.mean(axis=0), ref)
    mean_of_samples = float(np.mean(per_sample))
    return {
        "mean_of_sample_psnr": mean_of_samples,
        "psnr_of_mean": mean_psnr,
        "gap_db": mean_psnr - mean_of_samples,
    }
