"""Generic estimation engine for rare-event testing results.

Provides crude Monte Carlo, importance-weighted estimation over a sampling
mixture, ordinary control variates built from individual-component likelihood
ratios, SVD-backed multiple linear regression, relative-half-width convergence
metrics, and bootstrap analysis of the required number of tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .records import TestRecord

__all__ = [
    "EstimateReport",
    "RegressionFit",
    "BootstrapReport",
    "normal_quantile",
    "crude_monte_carlo",
    "importance_weighted_estimate",
    "ordinary_cv_estimate",
    "fit_mlr_svd",
    "relative_half_width",
    "required_num_tests",
    "bootstrap_rnot",
    "report_from_contributions",
    "crash_probs",
    "weighted_contributions",
    "component_ratio_matrix",
]

# Singular values below this fraction of the largest one are treated as zero,
# which makes rank-deficient designs well-defined via minimum-norm solutions.
SVD_RCOND = 1e-10


def normal_quantile(confidence: float) -> float:
    """Two-sided standard-normal quantile: z such that P(|Z| <= z) = confidence."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    return NormalDist().inv_cdf(0.5 + 0.5 * confidence)


@dataclass(frozen=True, slots=True)
class EstimateReport:
    """Point estimate with its asymptotic-variance convergence metrics.

    ``asymptotic_variance`` is the sample variance of the per-test
    contributions (denominator n-1; zero when n == 1).  ``rhw`` is the
    confidence half-width divided by the mean, or None when the mean is not
    positive.
    """

    mean: float
    asymptotic_variance: float
    n: int
    half_width: float
    rhw: float | None
    confidence: float


@dataclass(frozen=True, slots=True)
class RegressionFit:
    """Least-squares fit of centered regressors against a response."""

    intercept: float
    coefficients: np.ndarray
    residuals: np.ndarray
    rank: int


@dataclass(frozen=True, slots=True)
class BootstrapReport:
    """Distribution of the required number of tests over shuffled replays.

    ``rnots`` has one entry per shuffle (None where the threshold was never
    reached).  ``mean_rnot`` averages the reached shuffles only.
    ``mean_rnot_max_rhw_fallback`` additionally counts never-reached shuffles
    at the position of their maximum RHW, the alternative convention for
    runs that converge without ever crossing the threshold.
    """

    rnots: tuple[int | None, ...]
    mean_rnot: float | None
    num_reached: int
    num_shuffles: int
    mean_rnot_max_rhw_fallback: float | None


def _sample_variance(values: np.ndarray) -> float:
    if values.size <= 1:
        return 0.0
    return float(np.var(values, ddof=1))


def report_from_contributions(
    values: np.ndarray, confidence: float = 0.90
) -> EstimateReport:
    """Build an EstimateReport from per-test contribution values."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no samples")
    n = int(values.size)
    mean = float(np.mean(values))
    var = _sample_variance(values)
    z = normal_quantile(confidence)
    half = z * np.sqrt(var / n)
    rhw = half / mean if mean > 0.0 else None
    return EstimateReport(
        mean=mean,
        asymptotic_variance=var,
        n=n,
        half_width=half,
        rhw=rhw,
        confidence=confidence,
    )


def crash_probs(records: Iterable[TestRecord]) -> np.ndarray:
    return np.fromiter((r.crash_prob for r in records), dtype=float)


def weighted_contributions(records: Iterable[TestRecord]) -> np.ndarray:
    """Per-test contributions crash_prob * prod(p/q_alpha) over controlled steps.

    Raises ValueError on any step with q_alpha == 0, which would violate the
    support condition required for unbiased importance weighting.
    """
    out = []
    for r in records:
        w = 1.0
        for s in r.steps:
            if s.q_alpha == 0.0:
                raise ValueError(f"support violation: q_alpha == 0 in test {r.test_id}")
            w *= s.p / s.q_alpha
        out.append(r.crash_prob * w)
    return np.asarray(out, dtype=float)


def component_ratio_matrix(records: Sequence[TestRecord], num_components: int) -> np.ndarray:
    """Matrix of per-record products of q_j/q_alpha, one column per component j."""
    n = len(records)
    out = np.ones((n, num_components))
    for i, r in enumerate(records):
        for s in r.steps:
            inv = 1.0 / s.q_alpha
            for j in range(num_components):
                out[i, j] *= s.q_individual[j] * inv
    return out


def crude_monte_carlo(
    records: Iterable[TestRecord], confidence: float = 0.90
) -> EstimateReport:
    """Plain Monte Carlo estimate over records drawn from the naturalistic model."""
    values = crash_probs(records)
    if values.size == 0:
        raise ValueError("no samples")
    return report_from_contributions(values, confidence)


def importance_weighted_estimate(
    records: Sequence[TestRecord], confidence: float = 0.90
) -> EstimateReport:
    """Importance-weighted estimate over records sampled under the mixture."""
    if len(records) == 0:
        raise ValueError("no samples")
    return report_from_contributions(weighted_contributions(records), confidence)


def ordinary_cv_estimate(
    records: Sequence[TestRecord],
    beta: Sequence[float],
    num_components: int | None = None,
    confidence: float = 0.90,
) -> EstimateReport:
    """Control-variates estimate with a fixed, sample-independent control vector.

    The control variates are Z_ij = prod(q_j/q_alpha) - 1 for the first J-1
    mixture components; the J-th is redundant given the mixture identity.
    """
    beta = np.asarray(beta, dtype=float)
    if len(records) == 0:
        raise ValueError("no samples")
    if num_components is None:
        num_components = _infer_components(records, default=beta.size + 1)
    if beta.shape != (num_components - 1,):
        raise ValueError(
            f"beta must have length J-1 = {num_components - 1}, got {beta.shape}"
        )
    y = weighted_contributions(records)
    z = component_ratio_matrix(records, num_components - 1) - 1.0
    return report_from_contributions(y - z @ beta, confidence)


def fit_mlr_svd(y: np.ndarray, design: np.ndarray) -> RegressionFit:
    """Least squares of y on a column-centered design, via SVD.

    The intercept is the mean of y; the coefficients are the minimum-norm
    solution of design @ beta ~= y - mean(y), with singular values below
    SVD_RCOND times the largest treated as zero.  Rank-deficient designs
    (fewer rows than columns) are therefore well-defined.
    """
    y = np.asarray(y, dtype=float)
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or y.ndim != 1 or design.shape[0] != y.shape[0]:
        raise ValueError("invalid design: shape mismatch")
    if y.size == 0:
        raise ValueError("invalid design: empty response")
    if not (np.isfinite(y).all() and np.isfinite(design).all()):
        raise ValueError("invalid design: non-finite entries")
    intercept = float(np.mean(y))
    centered = y - intercept
    if design.shape[1] == 0:
        return RegressionFit(intercept, np.zeros(0), centered, 0)
    coef, _, rank, _ = np.linalg.lstsq(design, centered, rcond=SVD_RCOND)
    residuals = centered - design @ coef
    return RegressionFit(intercept, coef, residuals, int(rank))


def relative_half_width(report: EstimateReport) -> float:
    """Confidence half-width divided by the point estimate."""
    if report.mean <= 0.0:
        raise ValueError("RHW undefined: mean is not positive")
    z = normal_quantile(report.confidence)
    return z * np.sqrt(report.asymptotic_variance / report.n) / report.mean


def _running_rhw(values: np.ndarray, confidence: float) -> tuple[np.ndarray, np.ndarray]:
    """Running mean and RHW over every prefix of a contribution stream.

    Prefixes with nonpositive mean get RHW = +inf.  The n=1 prefix has sample
    variance 0 by convention.
    """
    values = np.asarray(values, dtype=float)
    n = np.arange(1, values.size + 1, dtype=float)
    csum = np.cumsum(values)
    csq = np.cumsum(values * values)
    mean = csum / n
    # var_n = (sum(x^2) - n*mean^2) / (n-1), clamped against rounding
    with np.errstate(invalid="ignore", divide="ignore"):
        var = (csq - n * mean * mean) / (n - 1.0)
    var = np.maximum(var, 0.0)
    if values.size >= 1:
        var[0] = 0.0
    z = normal_quantile(confidence)
    half = z * np.sqrt(var / n)
    with np.errstate(invalid="ignore", divide="ignore"):
        rhw = np.where(mean > 0.0, half / np.where(mean > 0.0, mean, 1.0), np.inf)
    return mean, rhw


def required_num_tests(
    contribution_stream: Sequence[float] | np.ndarray,
    rhw_threshold: float,
    confidence: float = 0.90,
) -> int | None:
    """Smallest prefix length whose running estimate has positive mean and
    RHW at or below the threshold; None if the threshold is never reached."""
    if rhw_threshold <= 0.0:
        raise ValueError("rhw_threshold must be positive")
    values = np.asarray(contribution_stream, dtype=float)
    if values.size == 0:
        return None
    mean, rhw = _running_rhw(values, confidence)
    hit = np.flatnonzero((mean > 0.0) & (rhw <= rhw_threshold))
    if hit.size == 0:
        return None
    return int(hit[0]) + 1


_ESTIMATOR_NAMES = ("crude", "is", "scv")


def estimator_contributions(
    records: Sequence[TestRecord],
    estimator: str,
    num_components: int | None = None,
    max_control_steps: int | None = None,
) -> np.ndarray:
    """Per-test contribution stream of the selected estimator, aligned with records.

    "crude" uses raw crash probabilities, "is" the importance-weighted
    contributions, and "scv" the control-variate-adjusted contributions with
    control vectors fitted once on the full record set (the fit is invariant
    under permutations of the records).
    """
    if estimator == "crude":
        return crash_probs(records)
    if estimator == "is":
        return weighted_contributions(records)
    if estimator == "scv":
        from .scv import adjusted_contributions, stratify

        if num_components is None:
            num_components = _infer_components(records)
        batch = stratify(records, max_control_steps if max_control_steps is not None else 9)
        return adjusted_contributions(batch, num_components)
    raise ValueError(f"unknown estimator {estimator!r}; expected one of {_ESTIMATOR_NAMES}")


def _infer_components(records: Sequence[TestRecord], default: int | None = None) -> int:
    for r in records:
        if r.steps:
            return len(r.steps[0].q_individual)
    if default is not None:
        return default
    raise ValueError("cannot infer component count: no controlled steps present")


def bootstrap_rnot(
    records: Sequence[TestRecord],
    num_shuffles: int = 200,
    rhw_threshold: float = 0.3,
    seed: int = 0,
    estimator: str = "is",
    confidence: float = 0.90,
    num_components: int | None = None,
    max_control_steps: int | None = None,
) -> BootstrapReport:
    """Bootstrap the required number of tests by shuffling the testing results.

    Shuffle k applies the Fisher-Yates permutation drawn from a generator
    seeded with (seed, k), so the report does not depend on execution order.
    Shuffles that never reach the threshold are excluded from the average and
    reported separately.
    """
    if num_shuffles < 1:
        raise ValueError("num_shuffles must be >= 1")
    if len(records) == 0:
        raise ValueError("no records")
    stream = estimator_contributions(
        records, estimator, num_components=num_components, max_control_steps=max_control_steps
    )
    rnots: list[int | None] = []
    fallbacks: list[int] = []
    for k in range(num_shuffles):
        rng = np.random.default_rng([seed, k])
        perm = rng.permutation(stream.size)
        shuffled = stream[perm]
        mean, rhw = _running_rhw(shuffled, confidence)
        hit = np.flatnonzero((mean > 0.0) & (rhw <= rhw_threshold))
        if hit.size:
            rnots.append(int(hit[0]) + 1)
            fallbacks.append(int(hit[0]) + 1)
        else:
            rnots.append(None)
            finite = np.where(np.isfinite(rhw), rhw, -np.inf)
            fallbacks.append(int(np.argmax(finite)) + 1)
    reached = [r for r in rnots if r is not None]
    return BootstrapReport(
        rnots=tuple(rnots),
        mean_rnot=float(np.mean(reached)) if reached else None,
        num_reached=len(reached),
        num_shuffles=num_shuffles,
        mean_rnot_max_rhw_fallback=float(np.mean(fallbacks)) if fallbacks else None,
    )
