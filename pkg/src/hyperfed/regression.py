"""Ordinary least squares with per-coefficient inference.

The fit solves the normal equations through a numerically stable least
squares solve, then reports coefficient, standard error, t statistic,
two-sided p value and 95% confidence bounds per predictor plus the model
R^2. Student-t tail probabilities come from the regularized incomplete
beta function rather than a statistics package:

    P(|T| > t) = I_{v/(v+t^2)}(v/2, 1/2)     with v degrees of freedom.

Predictors are normalized (zero mean, unit variance) by an explicit,
caller-visible step so coefficient magnitudes are comparable across
differently scaled hyperparameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaincinv

from .errors import ContractViolation

__all__ = [
    "PredictorStats",
    "RegressionReport",
    "SingularMatrixError",
    "normalize_predictors",
    "student_t_sf",
    "student_t_ppf",
    "ols_regress",
    "report_markdown",
]


class SingularMatrixError(ValueError):
    """The design matrix is rank deficient; names the offending predictor."""


@dataclass(frozen=True)
class PredictorStats:
    name: str
    coef: float
    std_err: float
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class RegressionReport:
    predictors: tuple[PredictorStats, ...]  # intercept ('const') first
    r_squared: float


def normalize_predictors(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean unit-variance columns; returns (normalized, means, stds)."""
    X = np.asarray(X, dtype=np.float64)
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    if np.any(stds == 0.0):
        col = int(np.flatnonzero(stds == 0.0)[0])
        raise ContractViolation(f"predictor {col} is constant and cannot be normalized")
    return (X - means) / stds, means, stds


def student_t_sf(t: float, dof: int) -> float:
    """Two-sided tail probability P(|T| >= t) for Student's t."""
    if dof < 1:
        raise ContractViolation("degrees of freedom must be >= 1")
    t = abs(float(t))
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return float(betainc(dof / 2.0, 0.5, x))


def student_t_ppf(p: float, dof: int) -> float:
    """Quantile of Student's t for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ContractViolation("p must be in (0, 1)")
    if p == 0.5:
        return 0.0
    tail = 2.0 * (1.0 - p) if p > 0.5 else 2.0 * p
    x = float(betaincinv(dof / 2.0, 0.5, tail))
    t = math.sqrt(dof * (1.0 - x) / x)
    return t if p > 0.5 else -t


def ols_regress(X: np.ndarray, y: np.ndarray, names=None) -> RegressionReport:
    """Fit y ~ const + X and report inference per coefficient.

    X must not contain an intercept column; one is added internally.
    Raises SingularMatrixError naming the first linearly dependent predictor.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ContractViolation("X must be 2-D")
    n, k = X.shape
    if len(y) != n:
        raise ContractViolation("X and y length mismatch")
    if n <= k + 1:
        raise ContractViolation(f"need more than {k + 1} observations, got {n}")
    if names is None:
        names = [f"x{i + 1}" for i in range(k)]
    if len(names) != k:
        raise ContractViolation("one name per predictor required")

    design = np.column_stack([np.ones(n), X])
    rank = np.linalg.matrix_rank(design)
    if rank < k + 1:
        # walk the columns to find the first one that adds no rank
        running = design[:, :1]
        for j in range(k):
            cand = np.column_stack([running, design[:, j + 1]])
            if np.linalg.matrix_rank(cand) == running.shape[1]:
                raise SingularMatrixError(
                    f"predictor {names[j]!r} is linearly dependent on the others"
                )
            running = cand
        raise SingularMatrixError("design matrix is rank deficient")

    coefs, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ coefs
    dof = n - k - 1
    sigma2 = float(residuals @ residuals) / dof
    cov = sigma2 * np.linalg.inv(design.T @ design)
    std_err = np.sqrt(np.diag(cov))

    ss_res = float(residuals @ residuals)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    t_crit = student_t_ppf(0.975, dof)
    rows = []
    for name, c, se in zip(["const", *names], coefs, std_err):
        if se > 0:
            t_stat = c / se
        else:
            t_stat = math.copysign(math.inf, c) if c != 0 else 0.0
        rows.append(PredictorStats(
            name=name,
            coef=float(c),
            std_err=float(se),
            t_stat=float(t_stat),
            p_value=student_t_sf(t_stat, dof),
            ci_low=float(c - t_crit * se),
            ci_high=float(c + t_crit * se),
        ))
    return RegressionReport(tuple(rows), r_squared)


def report_markdown(report: RegressionReport) -> str:
    """Markdown table: coef, std err, t, P>|t|, CI bounds, plus R^2 footer."""
    lines = [
        "| predictor | coef | std err | t | P>|t| | [0.025 | 0.975] |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in report.predictors:
        lines.append(
            f"| {row.name} | {row.coef:.4f} | {row.std_err:.4f} | {row.t_stat:.3f} "
            f"| {row.p_value:.3g} | {row.ci_low:.4f} | {row.ci_high:.4f} |"
        )
    lines.append("")
    lines.append(f"R^2 = {report.r_squared:.4f}")
    return "\n".join(lines)
