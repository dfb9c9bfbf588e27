"""Annealed Langevin posterior sampler over the SVD-transformed problem.

One chain runs the outer loop over annealing levels sigma_1 .. sigma_L and,
per level, tau inner Langevin iterations

    x_t <- x_t + c * A_i * d_t + sqrt(2 c) * A_i^(1/2) * z_t,

where d_t is the conditional score, A_i the diagonal step size matrix and
z_t standard normal. The iterate is kept in the V-domain between steps and
rotated to signal space only when the prior is queried and when a trace
snapshot or the final sample is emitted; rotation commutes with the update
because V is orthogonal.

Chains are deterministic given their seed. Multiple chains derive per-chain
seeds by spawning the master seed sequence, so chain k sees the same stream
regardless of how many chains run. When the prior can evaluate scores for a
batch of points (the analytic priors can), ``snips_sample_many`` advances
all chains in lockstep with the same per-chain noise streams, which is how
the statistical test suites stay fast.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .operators import DegradationSVD
from .priors import ScoreModel
from .schedule import NoiseSchedule, partition_spectrum, validate_crossing
from .score import conditional_score_parts, measurement_weights, step_sizes

_TRACE_POLICIES = ("none", "per-level", "per-step")


class DivergenceError(RuntimeError):
    """A chain produced a non-finite iterate."""

    def __init__(self, level_index: int, step_index: int):
        super().__init__(
            f"non-finite iterate at level {level_index}, inner step {step_index}"
        )
        self.level_index = level_index
        self.step_index = step_index


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    seed: int | np.random.SeedSequence = 0
    trace: str = "none"  # "none" | "per-level" | "per-step"
    init: np.ndarray | None = None  # None draws U[0,1); a vector pins the start

    def __post_init__(self):
        if self.trace not in _TRACE_POLICIES:
            raise ValueError(f"trace must be one of {_TRACE_POLICIES}, got {self.trace!r}")
        if self.init is not None:
            object.__setattr__(self, "init", np.asarray(self.init, dtype=np.float64))


@dataclass(frozen=True)
class LevelDiagnostics:
    level_index: int
    sigma: float
    mean_abs_score: float
    step_floor_hits: int


@dataclass(frozen=True)
class SampleResult:
    sample: np.ndarray
    trace: tuple | None
    rng_seed_used: str
    diagnostics: tuple[LevelDiagnostics, ...]


@dataclass(frozen=True)
class EnsembleResult:
    """Outcome of several independent chains plus pixelwise aggregates."""

    results: tuple[SampleResult, ...]
    failures: tuple[tuple[int, str], ...]  # (chain index, error message)
    mean: np.ndarray
    std: np.ndarray

    @property
    def samples(self) -> np.ndarray:
        return np.stack([r.sample for r in self.results])


@dataclass(frozen=True)
class _LevelKernel:
    """Everything about one annealing level that chains can share."""

    sigma: float
    partition: object
    weights: np.ndarray
    step: np.ndarray
    sqrt_step: np.ndarray
    floor_hits: int


def _seed_label(seed) -> str:
    if isinstance(seed, np.random.SeedSequence):
        return f"entropy={seed.entropy},spawn_key={seed.spawn_key}"
    return repr(seed)


def _check_problem(svd: DegradationSVD, y: np.ndarray, prior: ScoreModel, schedule):
    if y.shape != (svd.m,):
        raise ValueError(f"y must have length {svd.m}, got {y.shape}")
    if prior.dim != svd.n:
        raise ValueError(f"prior dim {prior.dim} != operator cols {svd.n}")
    report = validate_crossing(schedule, svd)
    if not report.ok:
        bad = "; ".join(e.reason for e in report.failures()[:3])
        raise ValueError(f"schedule never crosses the measurement noise: {bad}")


def _level_kernels(svd: DegradationSVD, schedule: NoiseSchedule) -> list[_LevelKernel]:
    kernels = []
    for i, sigma in enumerate(schedule.levels):
        part = partition_spectrum(sigma, schedule.sigma0, svd, level_index=i)
        alpha = step_sizes(sigma, schedule.sigma0, svd, part)
        kernels.append(
            _LevelKernel(
                sigma=float(sigma),
                partition=part,
                weights=measurement_weights(sigma, schedule.sigma0, svd, part),
                step=alpha.values,
                sqrt_step=np.sqrt(alpha.values),
                floor_hits=alpha.floor_hits,
            )
        )
    return kernels


def _initial_state(rng, cfg: SamplerConfig, n: int) -> np.ndarray:
    if cfg.init is None:
        return rng.uniform(size=n)
    if cfg.init.shape != (n,):
        raise ValueError(f"init must have length {n}, got {cfg.init.shape}")
    return cfg.init.copy()


def _vspace_prior_score(prior: ScoreModel, svd: DegradationSVD):
    """Return f(x_t, sigma) -> V^T score(V x_t, sigma), batched on rows.

    An isotropic Gaussian score commutes with the rotation, so it is
    evaluated directly in the V-domain; anything else rotates to signal
    space, queries the prior, and rotates back.
    """
    from .priors import GaussianPrior  # local import, avoids cycle at module load

    if isinstance(prior, GaussianPrior) and prior.is_isotropic:
        mu_t = svd.v.T @ prior.mean
        var = prior.isotropic_variance

        def score_iso(x_t, sigma):
            return (mu_t - x_t) / (var + sigma * sigma)

        return score_iso

    v = svd.v

    def score_rotated(x_t, sigma):
        if x_t.ndim == 2:
            g = np.asarray(prior.score(x_t @ v.T, sigma), dtype=np.float64)
            return g @ v
        g = np.asarray(prior.score(v @ x_t, sigma), dtype=np.float64)
        return v.T @ g

    return score_rotated


def snips_sample(
    svd: DegradationSVD,
    y: np.ndarray,
    prior: ScoreModel,
    cfg: SamplerConfig,
) -> SampleResult:
    """Draw one posterior sample for the measurement y. Deterministic per seed."""
    y = np.asarray(y, dtype=np.float64)
    schedule = cfg.schedule
    _check_problem(svd, y, prior, schedule)

    n = svd.n
    rng = np.random.default_rng(cfg.seed)
    x_t = svd.v.T @ _initial_state(rng, cfg, n)
    y_t = svd.u.T @ y
    c = schedule.c
    sqrt_2c = np.sqrt(2.0 * c)

    trace: list | None = None if cfg.trace == "none" else []
    diagnostics = []
    prior_score_v = _vspace_prior_score(prior, svd)
    for i, kern in enumerate(_level_kernels(svd, schedule)):
        noise = rng.standard_normal((schedule.tau, n))
        abs_d_sum = 0.0
        for t in range(schedule.tau):
            g_t = prior_score_v(x_t, kern.sigma)
            if not np.all(np.isfinite(g_t)):
                raise DivergenceError(i, t)
            d = conditional_score_parts(x_t, y_t, g_t, kern.weights, svd, kern.partition)
            x_t = x_t + c * kern.step * d + sqrt_2c * kern.sqrt_step * noise[t]
            if not np.all(np.isfinite(x_t)):
                raise DivergenceError(i, t)
            abs_d_sum += float(np.mean(np.abs(d)))
            if cfg.trace == "per-step":
                trace.append((i, t, svd.v @ x_t))
        if cfg.trace == "per-level":
            trace.append((i, schedule.tau - 1, svd.v @ x_t))
        diagnostics.append(
            LevelDiagnostics(i, kern.sigma, abs_d_sum / schedule.tau, kern.floor_hits)
        )
    return SampleResult(
        sample=svd.v @ x_t,
        trace=tuple(trace) if trace is not None else None,
        rng_seed_used=_seed_label(cfg.seed),
        diagnostics=tuple(diagnostics),
    )


def chain_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """Derive independent per-chain seed sequences from a master seed.

    Chain k's sequence depends only on the master seed and k, never on the
    count, and repeated calls return the same sequences (unlike spawn(),
    which advances the parent's child counter).
    """
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [
        np.random.SeedSequence(entropy=base.entropy, spawn_key=base.spawn_key + (k,))
        for k in range(count)
    ]


def _sample_many_batched(
    svd: DegradationSVD,
    y: np.ndarray,
    prior: ScoreModel,
    cfg: SamplerConfig,
    seeds,
) -> list:
    """Advance all chains in lockstep; same per-chain noise streams as the
    sequential path, one batched prior evaluation per inner step. y may be
    a single measurement or one row per chain."""
    schedule = cfg.schedule
    n = svd.n
    count = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    x0 = np.stack([_initial_state(rng, cfg, n) for rng in rngs])
    x_t = x0 @ svd.v  # row-wise V^T x
    y = np.asarray(y, dtype=np.float64)
    y_t = svd.u.T @ y if y.ndim == 1 else y @ svd.u
    c = schedule.c
    sqrt_2c = np.sqrt(2.0 * c)

    alive = np.ones(count, dtype=bool)
    death: dict[int, DivergenceError] = {}
    traces: list[list] | None = None if cfg.trace == "none" else [[] for _ in range(count)]
    abs_d = np.zeros(count)
    diagnostics: list[list[LevelDiagnostics]] = [[] for _ in range(count)]

    def snapshot(i, t):
        x_sig = x_t @ svd.v.T
        for kk in np.flatnonzero(alive):
            traces[kk].append((i, t, x_sig[kk].copy()))

    prior_score_v = _vspace_prior_score(prior, svd)
    for i, kern in enumerate(_level_kernels(svd, schedule)):
        noise = np.stack([rng.standard_normal((schedule.tau, n)) for rng in rngs])
        abs_d[:] = 0.0
        for t in range(schedule.tau):
            g_t = prior_score_v(x_t, kern.sigma)
            d = conditional_score_parts(x_t, y_t, g_t, kern.weights, svd, kern.partition)
            step = c * kern.step * d + sqrt_2c * kern.sqrt_step * noise[:, t, :]
            x_t = np.where(alive[:, None], x_t + step, x_t)
            bad = alive & ~np.all(np.isfinite(x_t), axis=1)
            if bad.any():
                for kk in np.flatnonzero(bad):
                    death[kk] = DivergenceError(i, t)
                alive &= ~bad
                x_t = np.where(np.isfinite(x_t), x_t, 0.0)  # keep dead rows inert
            abs_d += np.mean(np.abs(d), axis=1)
            if cfg.trace == "per-step":
                snapshot(i, t)
        if cfg.trace == "per-level":
            snapshot(i, schedule.tau - 1)
        for kk in range(count):
            if kk not in death or death[kk].level_index >= i:
                diagnostics[kk].append(
                    LevelDiagnostics(i, kern.sigma, float(abs_d[kk]) / schedule.tau,
                                     kern.floor_hits)
                )

    samples = x_t @ svd.v.T
    outcomes: list = []
    for kk in range(count):
        if kk in death:
            outcomes.append(death[kk])
        else:
            outcomes.append(
                SampleResult(
                    sample=samples[kk],
                    trace=tuple(traces[kk]) if traces is not None else None,
                    rng_seed_used=_seed_label(seeds[kk]),
                    diagnostics=tuple(diagnostics[kk]),
                )
            )
    return outcomes


def snips_sample_batch(
    svd: DegradationSVD,
    ys: np.ndarray,
    prior: ScoreModel,
    cfg: SamplerConfig,
) -> EnsembleResult:
    """One chain per row of ys, advanced in lockstep.

    Useful when several measurements share an operator and a prior, e.g.
    the channels of one image. Needs a batch-capable prior. Chain k uses
    the same stream it would get from ``snips_sample_many``.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim != 2 or ys.shape[1] != svd.m:
        raise ValueError(f"ys must be (count, {svd.m}), got {ys.shape}")
    if not getattr(prior, "supports_batch", False):
        raise ValueError("snips_sample_batch needs a batch-capable prior")
    _check_problem(svd, ys[0], prior, cfg.schedule)
    seeds = chain_seeds(cfg.seed, ys.shape[0])
    outcomes = _sample_many_batched(svd, ys, prior, cfg, seeds)
    results, failures = [], []
    for kk, out in enumerate(outcomes):
        if isinstance(out, Exception):
            failures.append((kk, f"{type(out).__name__}: {out}"))
        else:
            results.append(out)
    if not results:
        raise RuntimeError(f"all {ys.shape[0]} chains failed; first: {failures[0][1]}")
    stack = np.stack([r.sample for r in results])
    return EnsembleResult(
        results=tuple(results),
        failures=tuple(failures),
        mean=stack.mean(axis=0),
        std=stack.std(axis=0),
    )


def snips_sample_many(
    svd: DegradationSVD,
    y: np.ndarray,
    prior: ScoreModel,
    cfg: SamplerConfig,
    count: int,
    workers: int = 1,
) -> EnsembleResult:
    """Run independent chains and aggregate their samples pixelwise.

    A diverging chain is recorded in ``failures`` instead of aborting the
    ensemble; aggregates are over the surviving chains. Raises only if every
    chain fails. Priors exposing ``supports_batch = True`` are evaluated for
    all chains at once; others run chain by chain (optionally on a thread
    pool, e.g. an external denoiser must own one session per worker).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    _check_problem(svd, y, prior, cfg.schedule)
    seeds = chain_seeds(cfg.seed, count)

    if getattr(prior, "supports_batch", False) and workers == 1:
        outcomes = _sample_many_batched(svd, y, prior, cfg, seeds)
    else:
        configs = [
            SamplerConfig(schedule=cfg.schedule, seed=s, trace=cfg.trace, init=cfg.init)
            for s in seeds
        ]
        outcomes = [None] * count

        def run_one(chain_cfg):
            return snips_sample(svd, y, prior, chain_cfg)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_one, c) for c in configs]
                for kk, fut in enumerate(futures):
                    try:
                        outcomes[kk] = fut.result()
                    except Exception as exc:
                        outcomes[kk] = exc
        else:
            for kk, chain_cfg in enumerate(configs):
                try:
                    outcomes[kk] = run_one(chain_cfg)
                except Exception as exc:
                    outcomes[kk] = exc

    results = []
    failures = []
    for kk, out in enumerate(outcomes):
        if isinstance(out, Exception):
            failures.append((kk, f"{type(out).__name__}: {out}"))
        else:
            results.append(out)
    if not results:
        raise RuntimeError(f"all {count} chains failed; first: {failures[0][1]}")
    stack = np.stack([r.sample for r in results])
    return EnsembleResult(
        results=tuple(results),
        failures=tuple(failures),
        mean=stack.mean(axis=0),
        std=stack.std(axis=0),
    )
