"""Posterior sampling for noisy linear inverse problems.

SNIPS draws samples from p(x | y) for measurements y = H x + noise by
running annealed Langevin dynamics in the SVD domain of H, with an
analytically derived conditional score and per-coordinate Newton-style step
sizes. Analytic Gaussian and Gaussian-mixture priors provide exact ground
truth for verification; learned denoisers attach through a small binary
wire protocol.
"""

from .operators import (
    DecompositionError,
    DegradationSVD,
    LinearOperator,
    load_operator,
    make_block_average,
    make_inpainting_mask,
    make_random_projection,
    make_uniform_blur,
    operator_from_bytes,
    operator_to_bytes,
    save_operator,
    svd_decompose,
)
from .schedule import (
    CrossingReport,
    NoiseSchedule,
    SpectrumPartition,
    make_geometric_schedule,
    partition_spectrum,
    validate_crossing,
)
from .priors import (
    ExternalDenoiserClient,
    GaussianPrior,
    GmmPrior,
    ProtocolError,
    ScoreModel,
    load_gaussian_prior,
    load_gmm_prior,
    serve_denoiser,
)
from .score import (
    BoundaryWarning,
    ConditionalScoreInputs,
    StepSizeVector,
    conditional_score,
    measurement_weights,
    step_sizes,
)
from .sampler import (
    DivergenceError,
    EnsembleResult,
    SampleResult,
    SamplerConfig,
    chain_seeds,
    snips_sample,
    snips_sample_batch,
    snips_sample_many,
)
from .oracle import (
    CarvedNoise,
    CarvingError,
    GaussianPosterior,
    carve_noise_sequence,
    conditional_score_bruteforce,
    exact_conditional_gaussian,
    exact_gaussian_posterior,
    gaussian_posterior_schur,
)
from .diagnostics import (
    FaithfulnessReport,
    dagostino_k2,
    faithfulness,
    psnr,
    reports_to_csv,
    sample_vs_mean_gap,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
