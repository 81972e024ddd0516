"""Sparse control variates over strata of controlled-step counts.

Testing results are stratified by how many steps were adversarially
controlled.  Within each stratum, the importance-weighted contributions are
regressed on the tensor products of per-step component likelihood ratios; the
per-stratum intercepts, scaled by stratum proportions, sum to the adjusted
performance estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimators import (
    EstimateReport,
    RegressionFit,
    fit_mlr_svd,
    normal_quantile,
    weighted_contributions,
)
from .records import TestRecord

__all__ = [
    "StratifiedBatch",
    "StratumFit",
    "SCVResult",
    "stratify",
    "scv_design_row",
    "estimate_stratum",
    "scv_estimate",
    "adjusted_contributions",
    "write_stratum_table",
]

# Strata smaller than this skip the regression (coefficients forced to zero):
# fitting with nearly as many parameters as points yields zero residuals and a
# degenerate variance estimate.
MIN_STRATUM_FIT_SIZE = 3


@dataclass(frozen=True, slots=True)
class StratifiedBatch:
    """Records partitioned by controlled-step count, capped at max_control_steps.

    ``positions`` holds each record's index in the original sequence so that
    per-test adjusted contributions can be scattered back in input order.
    """

    strata: dict[int, list[TestRecord]]
    positions: dict[int, list[int]]
    n: int
    max_control_steps: int


@dataclass(frozen=True, slots=True)
class StratumFit:
    """Regression summary for one stratum."""

    l: int
    n_l: int
    mu_hat_l: float
    fit: RegressionFit
    d_l: int

    @property
    def residual_variance(self) -> float:
        r = self.fit.residuals
        if r.size <= 1:
            return 0.0
        return float(np.var(r, ddof=1))


@dataclass(frozen=True, slots=True)
class SCVResult:
    report: EstimateReport
    strata: tuple[StratumFit, ...]
    contributions: np.ndarray  # adjusted per-test values, input order


def stratify(records: Sequence[TestRecord], max_control_steps: int = 9) -> StratifiedBatch:
    """Partition records by controlled-step count.

    Records with max_control_steps or more controlled steps land in the top
    stratum; only their first max_control_steps steps enter the control
    design (the records themselves are preserved verbatim).
    """
    if max_control_steps < 1:
        raise ValueError("max_control_steps must be >= 1")
    strata: dict[int, list[TestRecord]] = {}
    positions: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        l = min(rec.num_control_steps, max_control_steps)
        strata.setdefault(l, []).append(rec)
        positions.setdefault(l, []).append(i)
    return StratifiedBatch(
        strata=strata,
        positions=positions,
        n=len(records),
        max_control_steps=max_control_steps,
    )


def scv_design_row(record: TestRecord, l: int, num_components: int) -> np.ndarray:
    """Control-design row: tensor products of per-step component ratios.

    Entry for the index tuple (j_1, ..., j_l) over the first J-1 components,
    in lexicographic order with j_1 most significant, is the product over the
    first l steps of q_individual[j]/q_alpha.  l = 0 yields an empty row.
    """
    if l > record.num_control_steps:
        raise ValueError(f"record has {record.num_control_steps} steps, need {l}")
    row = np.ones(1)
    for step in record.steps[:l]:
        if len(step.q_individual) < num_components:
            raise ValueError("incomplete likelihood record: missing q_individual")
        ratios = np.asarray(step.q_individual[: num_components - 1]) / step.q_alpha
        row = (row[:, None] * ratios[None, :]).ravel()
    if l == 0:
        return np.zeros(0)
    return row


def _design_matrix(records: Sequence[TestRecord], l: int, num_components: int) -> np.ndarray:
    """Stacked design rows for one stratum, built step by step."""
    n = len(records)
    if l == 0:
        # one all-zero column, mirroring the degenerate design of the
        # uncontrolled stratum
        return np.zeros((n, 1))
    h = np.ones((n, 1))
    for step_idx in range(l):
        ratios = np.empty((n, num_components - 1))
        for i, rec in enumerate(records):
            step = rec.steps[step_idx]
            if len(step.q_individual) < num_components:
                raise ValueError("incomplete likelihood record: missing q_individual")
            inv = 1.0 / step.q_alpha
            for j in range(num_components - 1):
                ratios[i, j] = step.q_individual[j] * inv
        h = (h[:, :, None] * ratios[:, None, :]).reshape(n, -1)
    return h


def estimate_stratum(
    stratum_records: Sequence[TestRecord],
    l: int,
    num_components: int,
    n_total: int,
) -> StratumFit:
    """Fit one stratum and return its scaled contribution to the estimate.

    The response is the full importance-weighted contribution of each record
    (all controlled steps enter the weight even when the design is truncated
    to the stratum's step count).  The design is column-centered before the
    fit, and the uncontrolled stratum always uses zero coefficients.
    """
    n_l = len(stratum_records)
    if n_l == 0:
        raise ValueError("empty stratum")
    d_l = (num_components - 1) ** l
    if l == 0:
        y = np.asarray([r.crash_prob for r in stratum_records], dtype=float)
        fit = RegressionFit(
            intercept=float(np.mean(y)),
            coefficients=np.zeros(d_l),
            residuals=y - np.mean(y),
            rank=0,
        )
    else:
        y = weighted_contributions(stratum_records)
        h = _design_matrix(stratum_records, l, num_components)
        h = h - h.mean(axis=0)
        if n_l < MIN_STRATUM_FIT_SIZE:
            fit = RegressionFit(
                intercept=float(np.mean(y)),
                coefficients=np.zeros(d_l),
                residuals=y - np.mean(y),
                rank=0,
            )
        else:
            fit = fit_mlr_svd(y, h)
    mu_hat_l = n_l * fit.intercept / n_total
    return StratumFit(l=l, n_l=n_l, mu_hat_l=mu_hat_l, fit=fit, d_l=d_l)


def scv_estimate(
    batch: StratifiedBatch,
    num_components: int,
    confidence: float = 0.90,
) -> SCVResult:
    """Combined stratified estimate with per-stratum control-variate fits.

    The point estimate is the sum of the scaled stratum intercepts; the
    asymptotic variance is the sample variance of the per-test adjusted
    contributions (stratum residuals shifted by their intercepts), whose
    overall mean equals the point estimate.
    """
    if batch.n == 0:
        raise ValueError("no samples")
    fits: list[StratumFit] = []
    z = np.empty(batch.n)
    for l in sorted(batch.strata):
        sf = estimate_stratum(batch.strata[l], l, num_components, batch.n)
        fits.append(sf)
        z[batch.positions[l]] = sf.fit.intercept + sf.fit.residuals
    mean = float(sum(sf.mu_hat_l for sf in fits))
    var = float(np.var(z, ddof=1)) if batch.n > 1 else 0.0
    zq = normal_quantile(confidence)
    half = zq * np.sqrt(var / batch.n)
    report = EstimateReport(
        mean=mean,
        asymptotic_variance=var,
        n=batch.n,
        half_width=half,
        rhw=half / mean if mean > 0.0 else None,
        confidence=confidence,
    )
    return SCVResult(report=report, strata=tuple(fits), contributions=z)


def adjusted_contributions(batch: StratifiedBatch, num_components: int) -> np.ndarray:
    """Per-test adjusted contributions in input order; mean equals the estimate."""
    return scv_estimate(batch, num_components).contributions


def write_stratum_table(fits: Sequence[StratumFit], path) -> None:
    """Per-stratum diagnostic table behind the rank-accounting figures."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "n_l", "d_l", "rank", "mu_hat_l", "residual_variance"])
        for sf in fits:
            writer.writerow(
                [sf.l, sf.n_l, sf.d_l, sf.fit.rank, repr(sf.mu_hat_l), repr(sf.residual_variance)]
            )
