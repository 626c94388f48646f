"""Delta-adjusted pattern-mixture sensitivity analysis and tipping points.

For each log-odds shift ``delta`` the logistic imputation model of the
target adds ``delta`` to the linear predictor of rows being imputed. Every
grid point reuses the primary seed, so chain ``m`` draws the same uniforms
and parameter perturbations at each delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import BINARY, Dataset
from .errors import DataError, PlanError
from .mice import LOGISTIC, ImputationPlan, ImputationSet, impute_all
from .pooling import AnalysisModelSpec, PooledResult, analyze_imputations

DEFAULT_DELTAS = (0.0, 0.1, 0.25, 0.5, 1.0, 10.0)
CI_CROSSES_ZERO = "ci-crosses-zero"
SIGN_FLIP = "sign-flip"


@dataclass(frozen=True)
class SensitivitySpec:
    target: str
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    alpha: float = 0.05
    M_sens: int = 10
    criterion: str = CI_CROSSES_ZERO

    def __post_init__(self):
        if not self.deltas:
            raise PlanError("at least one delta is required", "sensitivity.deltas")
        if any(math.isnan(x) for x in self.deltas) or list(self.deltas) != sorted(self.deltas):
            raise PlanError("deltas must be sorted ascending", "sensitivity.deltas")
        if not 0 < self.alpha < 1:
            raise PlanError("alpha must lie in (0, 1)", "sensitivity.alpha")
        if self.M_sens < 2:
            raise PlanError("M_sens must be >= 2", "sensitivity.M")
        if self.criterion not in (CI_CROSSES_ZERO, SIGN_FLIP):
            raise PlanError(f"unknown criterion {self.criterion!r}", "sensitivity.criterion")


@dataclass(frozen=True)
class DeltaResult:
    delta: float
    pooled: PooledResult
    fraction_imputed_positive: float


@dataclass
class SensitivityResults:
    entries: list[DeltaResult]
    criterion: str = CI_CROSSES_ZERO
    alpha: float = 0.05
    tipping_delta: float | None = None
    imputation_sets: dict[float, ImputationSet] = field(default_factory=dict, repr=False)

    @property
    def deltas(self) -> list[float]:
        return [e.delta for e in self.entries]


def fraction_imputed_positive(s: ImputationSet, target: str) -> float:
    """Mean over imputations of the share of originally missing cells imputed as 1."""
    if target not in s.imputed:
        raise DataError("target has no imputed cells", column=target)
    mask = s.imputed[target]
    n_mis = int(mask.sum())
    if n_mis == 0:
        raise DataError("target is fully observed", column=target)
    shares = [np.count_nonzero(ds[target].values[mask] == 1) / n_mis for ds in s.datasets]
    return float(np.mean(shares))


def _meets(pooled: PooledResult, criterion: str, alpha: float, reference: float | None) -> bool:
    if criterion == CI_CROSSES_ZERO:
        lo, hi = pooled.interval(1 - alpha)
        return lo <= 0.0 <= hi
    return reference is not None and np.sign(pooled.q_bar) != np.sign(reference)


def tipping_point(results: SensitivityResults, criterion: str | None = None,
                  alpha: float | None = None, reference: float | None = None) -> float | None:
    """Smallest grid delta whose pooled result meets ``criterion``, else None.

    ``sign-flip`` compares against ``reference`` or, when absent, the
    estimate at delta = 0 (the first grid point if 0 is not in the grid).
    """
    criterion = criterion or results.criterion
    alpha = results.alpha if alpha is None else alpha
    entries = sorted(results.entries, key=lambda e: e.delta)
    if criterion == SIGN_FLIP and reference is None:
        zero = [e for e in entries if e.delta == 0.0]
        reference = (zero[0] if zero else entries[0]).pooled.q_bar
    for e in entries:
        if _meets(e.pooled, criterion, alpha, reference):
            return e.delta
    return None


def run_delta_grid(d: Dataset, plan: ImputationPlan, analysis: AnalysisModelSpec,
                   spec: SensitivitySpec, threads: int = 1,
                   keep_imputations: bool = False) -> SensitivityResults:
    """Impute, analyze and pool at every delta of ``spec.deltas``."""
    target_spec = plan.spec_for(spec.target)
    if target_spec.method != LOGISTIC or d[spec.target].kind != BINARY:
        raise PlanError("sensitivity target must be a binary variable imputed by logistic "
                        "regression", "sensitivity.target")
    base = plan.with_config(M=spec.M_sens)
    entries = []
    kept = {}
    for delta in spec.deltas:
        s = impute_all(d, base.with_delta(spec.target, delta), threads=threads)
        entries.append(DeltaResult(delta, analyze_imputations(s, analysis),
                                   fraction_imputed_positive(s, spec.target)))
        if keep_imputations:
            kept[delta] = s
    results = SensitivityResults(entries, spec.criterion, spec.alpha, imputation_sets=kept)
    results.tipping_delta = tipping_point(results)
    return results
