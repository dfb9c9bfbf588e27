"""Acceptance gate: every registered criterion at its pre-registered seed and
tolerance, one pass/fail line printed per criterion.

Budgets (wall time) per criterion are asserted as well; the whole suite is
sized for commodity hardware.
"""

import pytest

from snips.harness import DEFAULT_SEED, _REGISTRY, SuiteResult, run_suite

BUDGET_SECONDS = {
    "gaussian_posterior_equivalence": 300,
    "carved_noise_variance_law": 60,
    "conditional_score_vs_bruteforce": 120,
    "step_size_hessian": 30,
    "faithfulness_battery": 180,
    "sample_vs_mean_gap": 120,
    "degenerations": 120,
    "dagostino_calibration": 60,
}

_results: dict[str, SuiteResult] = {}


def _run(name: str) -> SuiteResult:
    if name not in _results:
        _results[name] = run_suite([name], seed=DEFAULT_SEED)[0]
    return _results[name]


@pytest.mark.parametrize("name", list(_REGISTRY))
def test_criterion(name):
    result = _run(name)
    verdict = "PASS" if result.passed else "FAIL"
    print(
        f"[{verdict}] {result.name}: statistic {result.statistic:.4g} "
        f"vs threshold {result.threshold:.4g} ({result.seconds:.1f}s)\n"
        f"        {result.detail}"
    )
    assert result.passed, f"{name}: {result.detail}"
    assert result.seconds <= BUDGET_SECONDS[name], (
        f"{name} exceeded its {BUDGET_SECONDS[name]}s budget: {result.seconds:.1f}s"
    )


def test_suite_is_deterministic_for_cheap_members():
    a = run_suite(["carved_noise_variance_law"], seed=DEFAULT_SEED)[0]
    b = run_suite(["carved_noise_variance_law"], seed=DEFAULT_SEED)[0]
    assert a.statistic == b.statistic


def test_posterior_equivalence_problems_have_mixed_spectra():
    # the randomized problems must actually exercise all three regimes
    from snips.harness import _random_mixed_problem
    from snips.operators import svd_decompose
    from snips.schedule import partition_spectrum

    saw_zero = saw_less = saw_greater = False
    for pseed in (101, 202, 303, 404, 505):
        op, _, sigma0, _ = _random_mixed_problem(pseed)
        svd = svd_decompose(op)
        for sigma in (8.0, 0.05):
            part = partition_spectrum(sigma, sigma0, svd)
            saw_zero |= part.zero.size > 0
            saw_less |= part.less.size > 0
            saw_greater |= part.greater.size > 0
    assert saw_zero and saw_less and saw_greater


def test_problem_sizes_within_bounds():
    from snips.harness import _random_mixed_problem

    for pseed in (101, 202, 303, 404, 505):
        op, prior, sigma0, y = _random_mixed_problem(pseed)
        assert op.cols <= 8 and op.rows <= 8
        assert sigma0 in (0.05, 0.1)
        assert y.shape == (op.rows,)
