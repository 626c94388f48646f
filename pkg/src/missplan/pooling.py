"""Analysis model fitting, Rubin's rules, and complete-records analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import glm
from .dataset import CATEGORICAL, CONTINUOUS, DERIVED, Dataset, complete_record_mask
from .design import dataset_design
from .errors import DataError, NumericalError, PlanError
from .mice import ImputationSet


@dataclass(frozen=True)
class AnalysisModelSpec:
    outcome: str
    exposure: str
    covariates: tuple[str, ...] = ()

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.outcome, self.exposure, *self.covariates)

    @property
    def regressors(self) -> tuple[str, ...]:
        return (self.exposure, *self.covariates)

    def validate(self, d: Dataset) -> None:
        names = self.variables
        if len(set(names)) != len(names):
            raise PlanError("outcome, exposure and covariates must be distinct", "analysis")
        for n in names:
            if n not in d:
                raise PlanError(f"unknown variable {n!r}", "analysis")
        if d[self.outcome].kind not in (CONTINUOUS, DERIVED):
            raise PlanError("outcome must be continuous", "analysis.outcome")
        if d[self.exposure].kind == CATEGORICAL:
            raise PlanError("exposure must be binary or continuous", "analysis.exposure")


@dataclass(frozen=True)
class PooledResult:
    q_bar: float
    w_bar: float
    b: float
    t: float
    df: float
    ci_low: float
    ci_high: float
    p: float
    M: int
    level: float = 0.95

    @property
    def se(self) -> float:
        return math.sqrt(self.t)

    def interval(self, level: float) -> tuple[float, float]:
        return _interval(self.q_bar, self.t, self.df, level)


def _quantile(df: float, level: float) -> float:
    tail = 0.5 + level / 2
    return stats.norm.ppf(tail) if math.isinf(df) else stats.t.ppf(tail, df)


def _interval(q: float, t: float, df: float, level: float) -> tuple[float, float]:
    half = _quantile(df, level) * math.sqrt(t)
    return q - half, q + half


def _p_value(q: float, t: float, df: float) -> float:
    if t == 0.0:
        return 1.0 if q == 0.0 else 0.0
    z = abs(q) / math.sqrt(t)
    return float(2 * (stats.norm.sf(z) if math.isinf(df) else stats.t.sf(z, df)))


def _result(q, w, b, t, df, M, level=0.95) -> PooledResult:
    lo, hi = _interval(q, t, df, level)
    return PooledResult(float(q), float(w), float(b), float(t), float(df), float(lo), float(hi),
                        _p_value(q, t, df), int(M), level)


def _shifted_mean(x: np.ndarray) -> float:
    # exact when all inputs are equal, independent of input order
    lo = float(np.min(x))
    return lo + math.fsum(x - lo) / x.size


def pool_rubin(estimates: Sequence[float], variances: Sequence[float],
               nu_com: float | None = None, level: float = 0.95) -> PooledResult:
    """Combine per-imputation estimates with Rubin's rules.

    Degrees of freedom use Rubin's classic formula, with the Barnard-Rubin
    small-sample adjustment when the complete-data df ``nu_com`` is given.
    If the between-imputation variance is zero the total variance is the
    within variance and df is ``nu_com`` (normal reference when absent).
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    M = q.size
    if M < 2 or u.size != M:
        raise DataError("pooling needs at least 2 imputations with one variance each")
    if np.any(u < 0):
        raise DataError("variances must be non-negative")
    q_bar = _shifted_mean(q)
    w_bar = _shifted_mean(u)
    b = math.fsum((q - q_bar) ** 2) / (M - 1)
    t = w_bar + (1 + 1 / M) * b
    if b == 0.0:
        df = math.inf if nu_com is None else float(nu_com)
    else:
        df_classic = (M - 1) * (1 + w_bar / ((1 + 1 / M) * b)) ** 2
        df = df_classic
        if nu_com is not None:
            lam = (1 + 1 / M) * b / t
            df_obs = (nu_com + 1) / (nu_com + 3) * nu_com * (1 - lam)
            df = 1 / (1 / df_classic + 1 / df_obs) if df_obs > 0 else df_classic
    return _result(q_bar, w_bar, b, t, df, M, level)


def fit_analysis_model(d: Dataset, spec: AnalysisModelSpec) -> tuple[float, float, int]:
    """OLS of outcome on exposure and covariates.

    Returns (exposure coefficient, its squared standard error, residual df).
    """
    d.check_names(spec.variables)
    for n in spec.variables:
        if d[n].n_missing:
            raise DataError("analysis model variables must be fully observed", column=n)
    X, labels = dataset_design(d, spec.regressors)
    fit = glm.fit_ols(X, d[spec.outcome].values, labels=labels)
    var = fit.sigma2_hat * fit.xtx_inv[1, 1]
    return float(fit.beta[1]), float(var), int(fit.nu)


def analyze_imputations(s: ImputationSet, spec: AnalysisModelSpec) -> PooledResult:
    ests, vars_ = [], []
    nu = None
    for ds in s.datasets:
        e, v, nu = fit_analysis_model(ds, spec)
        ests.append(e)
        vars_.append(v)
    return pool_rubin(ests, vars_, nu_com=nu)


def complete_records_analysis(d: Dataset, spec: AnalysisModelSpec) -> PooledResult:
    """Single OLS fit on rows with every model variable observed (b = 0, M = 1)."""
    mask = complete_record_mask(d, spec.variables)
    X, labels = dataset_design(d, spec.regressors)
    if np.count_nonzero(mask) <= X.shape[1]:
        raise NumericalError(f"only {int(mask.sum())} complete records for "
                             f"{X.shape[1]} parameters")
    fit = glm.fit_ols(X[mask], d[spec.outcome].values[mask], labels=labels)
    var = float(fit.sigma2_hat * fit.xtx_inv[1, 1])
    return single_result(float(fit.beta[1]), var, float(fit.nu))


def single_result(estimate: float, variance: float, df: float) -> PooledResult:
    """Wrap one fit as a result with M = 1 and no between-imputation variance."""
    return _result(estimate, variance, 0.0, variance, df, 1)
