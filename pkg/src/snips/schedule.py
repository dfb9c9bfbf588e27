"""Annealing noise schedules and the per-level singular spectrum partition.

A schedule is a strictly decreasing run of noise levels sigma_1 .. sigma_L,
the measurement noise sigma0, the step constant c and the inner iteration
count tau. At each level, signal coordinates (in the V-transformed domain)
fall into one of three regimes depending on how the scaled annealing noise
sigma_i * s_j compares with sigma0:

  zero     s_j = 0                  no measurement reaches the coordinate
  greater  sigma_i * s_j > sigma0   annealing noise still dominates
  less     0 < sigma_i * s_j <= sigma0   measurement noise dominates

Boundary equality is routed to "less": both the measurement covariance and
the step size degrade continuously to zero there. Comparisons are exact, not
epsilon-banded, so the partition is deterministic; near-boundary levels are
surfaced by ``validate_crossing`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import DegradationSVD

_NEAR_BOUNDARY_RTOL = 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing annealing levels plus sampler constants."""

    levels: np.ndarray
    sigma0: float
    c: float
    tau: int

    def __post_init__(self):
        lv = np.ascontiguousarray(self.levels, dtype=np.float64)
        if lv.ndim != 1 or lv.size < 1:
            raise ValueError("levels must be a non-empty 1-D array")
        if not np.all(np.isfinite(lv)):
            raise ValueError("levels must be finite")
        if lv[-1] <= 0:
            raise ValueError("all levels must be positive")
        if lv.size > 1 and not np.all(np.diff(lv) < 0):
            raise ValueError("levels must be strictly decreasing")
        if not np.isfinite(self.sigma0) or self.sigma0 < 0:
            raise ValueError(f"sigma0 must be finite and >= 0, got {self.sigma0}")
        if not np.isfinite(self.c) or self.c <= 0:
            raise ValueError(f"step constant c must be positive, got {self.c}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError(f"tau must be an integer >= 1, got {self.tau}")
        lv.flags.writeable = False
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "tau", int(self.tau))

    def __len__(self) -> int:
        return self.levels.size


def make_geometric_schedule(
    sigma1: float, sigmaL: float, L: int, sigma0: float, c: float, tau: int
) -> NoiseSchedule:
    """Geometric run from sigma1 down to sigmaL with exact endpoints."""
    if L < 2:
        raise ValueError(f"need at least 2 levels, got {L}")
    if not sigma1 > sigmaL > 0:
        raise ValueError(f"need sigma1 > sigmaL > 0, got {sigma1}, {sigmaL}")
    return NoiseSchedule(levels=np.geomspace(sigma1, sigmaL, L), sigma0=sigma0, c=c, tau=tau)


@dataclass(frozen=True)
class SpectrumPartition:
    """Index sets over the N signal coordinates for one annealing level."""

    zero: np.ndarray
    less: np.ndarray
    greater: np.ndarray
    level_index: int
    sigma_i: float
    sigma0: float

    def __post_init__(self):
        total = np.concatenate([self.zero, self.less, self.greater])
        n = total.size
        if np.unique(total).size != n or (n and set(total.tolist()) != set(range(n))):
            raise ValueError("partition sets must be disjoint and cover 0..N-1")

    @property
    def n(self) -> int:
        return self.zero.size + self.less.size + self.greater.size


def partition_spectrum(
    sigma_i: float, sigma0: float, svd: DegradationSVD, level_index: int = 0
) -> SpectrumPartition:
    """Split the V-domain coordinates into zero / less / greater regimes."""
    if sigma_i <= 0:
        raise ValueError(f"sigma_i must be positive, got {sigma_i}")
    s = svd.extended_singulars
    zero = s == 0.0
    greater = sigma_i * s > sigma0
    less = ~zero & ~greater
    idx = np.arange(s.size)
    return SpectrumPartition(
        zero=idx[zero],
        less=idx[less],
        greater=idx[greater],
        level_index=level_index,
        sigma_i=float(sigma_i),
        sigma0=float(sigma0),
    )


@dataclass(frozen=True)
class CrossingEntry:
    """Crossing diagnosis for one nonzero singular value."""

    index: int
    singular: float
    crossing_level: int | None  # first level i with sigma_i * s < sigma0
    exact_levels: tuple[int, ...]  # levels where sigma_i * s == sigma0 exactly
    near_levels: tuple[int, ...]  # levels within 1e-9 relative of the boundary
    ok: bool
    reason: str = ""


@dataclass(frozen=True)
class CrossingReport:
    """validate_crossing output: report-only, never raises."""

    ok: bool
    entries: tuple[CrossingEntry, ...]
    warnings: tuple[str, ...] = field(default=())

    def failures(self) -> list[CrossingEntry]:
        return [e for e in self.entries if not e.ok]


def validate_crossing(schedule: NoiseSchedule, svd: DegradationSVD) -> CrossingReport:
    """Check that every nonzero singular value crosses the measurement noise.

    A valid crossing for singular value s means some level i has
    sigma_i * s < sigma0 while the previous level satisfies
    sigma_{i-1} * s > sigma0. Exact equalities are permitted by the sampler
    but reported here, as are near-boundary levels, so that operators can
    audit a schedule before a long run. With sigma0 = 0 every nonzero s sits
    in the "greater" regime at all levels and the check is vacuous.
    """
    levels = schedule.levels
    sigma0 = schedule.sigma0
    entries = []
    warnings = []
    for j, s in enumerate(svd.extended_singulars):
        if s == 0.0:
            continue
        scaled = levels * s
        if sigma0 == 0.0:
            entries.append(
                CrossingEntry(j, float(s), None, (), (), True, "sigma0=0: always greater")
            )
            continue
        exact = tuple(int(i) for i in np.flatnonzero(scaled == sigma0))
        near = tuple(
            int(i)
            for i in np.flatnonzero(np.abs(scaled - sigma0) <= _NEAR_BOUNDARY_RTOL * sigma0)
            if i not in exact
        )
        below = np.flatnonzero(scaled < sigma0)
        if below.size == 0:
            entries.append(
                CrossingEntry(
                    j, float(s), None, exact, near, False,
                    f"never drops below sigma0: sigma_L*s = {scaled[-1]:.3e} >= {sigma0:.3e}",
                )
            )
            continue
        first_below = int(below[0])
        if first_below == 0:
            entries.append(
                CrossingEntry(
                    j, float(s), 0, exact, near, False,
                    f"already below sigma0 at the first level: sigma_1*s = {scaled[0]:.3e}",
                )
            )
            continue
        ok = scaled[first_below - 1] > sigma0
        reason = "" if ok else f"boundary equality at level {first_below - 1}"
        entries.append(CrossingEntry(j, float(s), first_below, exact, near, True, reason))
        if exact:
            warnings.append(f"s[{j}]={s:.6g}: exact boundary at levels {exact}")
        if near:
            warnings.append(f"s[{j}]={s:.6g}: near-boundary levels {near}")
    return CrossingReport(
        ok=all(e.ok for e in entries),
        entries=tuple(entries),
        warnings=tuple(warnings),
    )
