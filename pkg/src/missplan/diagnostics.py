"""Exploratory missing-data diagnostics.

Per-variable missingness, pattern tables, complete-versus-incomplete
comparisons and crude (optionally adjusted) predictors of being a complete
record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import glm
from .dataset import BINARY, CATEGORICAL, Dataset, complete_record_mask
from .design import dataset_design
from .errors import DataError
from .formatting import fmt_int, fmt_num, fmt_pct, markdown_table

MAX_PATTERN_VARS = 31


@dataclass(frozen=True)
class VariableMissingness:
    name: str
    n_observed: int
    n_missing: int
    pct_missing: float


@dataclass(frozen=True)
class MissingSummary:
    n_rows: int
    variables: tuple[VariableMissingness, ...]
    n_complete_records: int
    pct_complete_records: float

    @property
    def pct_incomplete_records(self) -> float:
        return 100.0 - self.pct_complete_records

    def get(self, name: str) -> VariableMissingness:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_rows(self) -> list[dict]:
        rows = [{"variable": v.name, "n_observed": v.n_observed, "n_missing": v.n_missing,
                 "pct_missing": v.pct_missing} for v in self.variables]
        rows.append({"variable": "(complete records)", "n_observed": self.n_complete_records,
                     "n_missing": self.n_rows - self.n_complete_records,
                     "pct_missing": self.pct_incomplete_records})
        return rows

    def to_markdown(self) -> str:
        body = [[v.name, f"{fmt_int(v.n_observed)} ({fmt_pct(100 - v.pct_missing)})",
                 fmt_int(v.n_missing), fmt_pct(v.pct_missing, 1)] for v in self.variables]
        body.append(["Complete records",
                     f"{fmt_int(self.n_complete_records)} ({fmt_pct(self.pct_complete_records)})",
                     fmt_int(self.n_rows - self.n_complete_records),
                     fmt_pct(self.pct_incomplete_records, 1)])
        return markdown_table([f"Variable", f"Available data (n={fmt_int(self.n_rows)})",
                               "Missing", "% missing"], body)


def missing_summary(d: Dataset, analysis_vars: Sequence[str]) -> MissingSummary:
    d.check_names(analysis_vars)
    n = d.n_rows
    if n == 0:
        raise DataError("dataset has no rows")
    rows = []
    for name in analysis_vars:
        c = d[name]
        miss = c.n_missing
        rows.append(VariableMissingness(name, n - miss, miss, 100.0 * miss / n))
    complete = int(complete_record_mask(d, analysis_vars).sum())
    return MissingSummary(n, tuple(rows), complete, 100.0 * complete / n)


@dataclass(frozen=True)
class PatternTable:
    """Observed (True) / missing (False) signatures with their row counts."""

    variables: tuple[str, ...]
    rows: tuple[tuple[tuple[bool, ...], int], ...]

    def to_rows(self) -> list[dict]:
        out = []
        for sig, count in self.rows:
            r = {v: int(o) for v, o in zip(self.variables, sig)}
            r["n_missing_vars"] = sum(not o for o in sig)
            r["count"] = count
            out.append(r)
        return out

    def to_markdown(self) -> str:
        body = [[("O" if o else "M") for o in sig] + [fmt_int(count)] for sig, count in self.rows]
        return markdown_table(list(self.variables) + ["Count"], body)


def pattern_table(d: Dataset, vars: Sequence[str]) -> PatternTable:
    """Distinct missingness patterns, most frequent first.

    Ties are ordered lexicographically on the missing-indicator vector, so
    patterns with earlier variables observed come first.
    """
    d.check_names(vars)
    k = len(vars)
    if k > MAX_PATTERN_VARS:
        raise DataError(f"pattern table supports at most {MAX_PATTERN_VARS} variables, got {k}")
    code = np.zeros(d.n_rows, dtype=np.int64)
    for j, name in enumerate(vars):
        code |= (~d[name].observed).astype(np.int64) << (k - 1 - j)
    uniq, counts = np.unique(code, return_counts=True)
    order = sorted(range(uniq.size), key=lambda i: (-counts[i], uniq[i]))
    rows = []
    for i in order:
        c = int(uniq[i])
        sig = tuple(not (c >> (k - 1 - j)) & 1 for j in range(k))
        rows.append((sig, int(counts[i])))
    return PatternTable(tuple(vars), tuple(rows))


GROUPS = ("all", "complete", "incomplete")
GROUP_LABELS = {"all": "All", "complete": "Complete records", "incomplete": "Incomplete records"}


@dataclass(frozen=True)
class GroupStats:
    """Summary of one variable (or one level) within one group."""

    n: int
    count: int | None = None
    pct: float = math.nan
    mean: float = math.nan
    sd: float = math.nan
    median: float = math.nan
    q1: float = math.nan
    q3: float = math.nan


@dataclass(frozen=True)
class ComparisonRow:
    variable: str
    level: str | None  # None for continuous variables
    n_available: int
    groups: Mapping[str, GroupStats]


@dataclass(frozen=True)
class ComparisonTable:
    n_rows: int
    group_sizes: Mapping[str, int]
    rows: tuple[ComparisonRow, ...]

    def to_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            rec = {"variable": r.variable, "level": r.level or "", "n_available": r.n_available}
            for g in GROUPS:
                s = r.groups[g]
                rec[f"{g}_n"] = s.n
                if r.level is not None:
                    rec[f"{g}_count"] = s.count
                    rec[f"{g}_pct"] = s.pct
                else:
                    for stat in ("mean", "sd", "median", "q1", "q3"):
                        rec[f"{g}_{stat}"] = getattr(s, stat)
            out.append(rec)
        return out

    def to_markdown(self) -> str:
        header = ["Characteristic", "", f"Available data (n={fmt_int(self.n_rows)}) N (%)"]
        header += [f"{GROUP_LABELS[g]} (n={fmt_int(self.group_sizes[g])})" for g in GROUPS]
        body = []
        last = None
        for r in self.rows:
            first = r.variable != last
            last = r.variable
            avail = (f"{fmt_int(r.n_available)} ({fmt_pct(100 * r.n_available / self.n_rows)})"
                     if first and self.n_rows else "")
            if r.level is None:
                cells = [f"{fmt_num(s.mean, 1)} ({fmt_num(s.sd, 1)}); "
                         f"median {fmt_num(s.median, 1)} ({fmt_num(s.q1, 1)} to {fmt_num(s.q3, 1)})"
                         if s.n else "n=0" for s in (r.groups[g] for g in GROUPS)]
                label = "Mean (SD); median (IQR)"
            else:
                cells = [f"{fmt_int(s.count)} ({fmt_pct(s.pct)})" if s.n else "n=0"
                         for s in (r.groups[g] for g in GROUPS)]
                label = r.level
            body.append([r.variable if first else "", label, avail] + cells)
        return markdown_table(header, body)


def _continuous_stats(x: np.ndarray) -> GroupStats:
    if x.size == 0:
        return GroupStats(0)
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    sd = float(np.std(x, ddof=1)) if x.size > 1 else math.nan
    return GroupStats(int(x.size), mean=float(np.mean(x)), sd=sd, median=float(med),
                      q1=float(q1), q3=float(q3))


def group_compare(d: Dataset, mask, vars: Sequence[str]) -> ComparisonTable:
    """Observed-cell summaries for all rows and split by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (d.n_rows,):
        raise DataError("mask length must equal the number of rows")
    d.check_names(vars)
    groups = {"all": np.ones(d.n_rows, dtype=bool), "complete": mask, "incomplete": ~mask}
    rows = []
    for name in vars:
        c = d[name]
        avail = int(c.observed.sum())
        if c.kind in (CATEGORICAL, BINARY):
            labels = c.levels if c.kind == CATEGORICAL else ("0", "1")
            for code, lab in enumerate(labels):
                per = {}
                for g, gm in groups.items():
                    sel = gm & c.observed
                    n = int(sel.sum())
                    cnt = int(np.count_nonzero(c.values[sel] == code))
                    per[g] = GroupStats(n, cnt, 100.0 * cnt / n if n else math.nan)
                rows.append(ComparisonRow(name, lab, avail, per))
        else:
            per = {g: _continuous_stats(c.values[gm & c.observed]) for g, gm in groups.items()}
            rows.append(ComparisonRow(name, None, avail, per))
    sizes = {g: int(gm.sum()) for g, gm in groups.items()}
    return ComparisonTable(d.n_rows, sizes, tuple(rows))


@dataclass(frozen=True)
class PredictorRow:
    variable: str
    term: str
    odds_ratio: float
    ci_low: float
    ci_high: float
    p: float
    reference: bool = False


@dataclass(frozen=True)
class PredictorModel:
    variables: tuple[str, ...]
    rows: tuple[PredictorRow, ...]
    auc: float
    n_used: int
    augmented: bool = False


@dataclass
class PredictorReport:
    crude: list[PredictorModel]
    adjusted: PredictorModel | None = None
    per_units: dict[str, float] = field(default_factory=dict)

    def model_for(self, variable: str) -> PredictorModel:
        for m in self.crude:
            if m.variables == (variable,):
                return m
        raise KeyError(variable)

    def to_rows(self) -> list[dict]:
        out = []
        models = [("crude", m) for m in self.crude]
        if self.adjusted is not None:
            models.append(("adjusted", self.adjusted))
        for kind, m in models:
            for r in m.rows:
                out.append({"model": kind, "variable": r.variable, "term": r.term,
                            "odds_ratio": r.odds_ratio, "ci_low": r.ci_low, "ci_high": r.ci_high,
                            "p": r.p, "auc": m.auc, "n_used": m.n_used,
                            "augmented": m.augmented})
        return out

    def to_markdown(self) -> str:
        def body(models, with_auc=True):
            lines = []
            for m in models:
                first, last = True, None
                for r in m.rows:
                    orci = ("1.00" if r.reference else
                            f"{fmt_num(r.odds_ratio, 2)} ({fmt_num(r.ci_low, 2)}, {fmt_num(r.ci_high, 2)})")
                    row = [r.variable if r.variable != last else "", r.term, orci]
                    last = r.variable
                    if with_auc:
                        row += [fmt_num(m.auc, 2) if first else "", fmt_int(m.n_used) if first else ""]
                    lines.append(row)
                    first = False
            return lines

        text = markdown_table(["Characteristic", "", "Crude odds ratio (95% confidence interval)",
                               "Area under the curve", "n used"], body(self.crude))
        if self.adjusted is not None:
            text += "\n\nAdjusted model (all candidates jointly, n used = " \
                    f"{fmt_int(self.adjusted.n_used)}, AUC {fmt_num(self.adjusted.auc, 2)}):\n\n"
            text += markdown_table(["Characteristic", "", "Adjusted odds ratio (95% CI)"],
                                   body([self.adjusted], with_auc=False))
        return text


def _unit_label(k: float) -> str:
    return f"per {k:g} unit increase" if k != 1 else "per 1 unit increase"


def _fit_predictors(d: Dataset, y: np.ndarray, names: Sequence[str],
                    per_units: Mapping[str, float]) -> PredictorModel:
    used = np.ones(d.n_rows, dtype=bool)
    for n in names:
        used &= d[n].observed
    n_used = int(used.sum())
    yu = y[used].astype(float)
    if yu.min() == yu.max():
        raise DataError(f"indicator has a single class among rows observed on {list(names)}")
    X, labels = dataset_design(d, names)
    Xu = X[used]
    for j in range(1, Xu.shape[1]):
        if np.ptp(Xu[:, j]) == 0:
            raise DataError(f"candidate term {labels[j]!r} is constant among used rows")
    fit = glm.fit_logistic(Xu, yu)
    se = np.sqrt(np.diag(fit.cov))
    z975 = stats.norm.ppf(0.975)
    rows = []
    j = 1
    for name in names:
        c = d[name]
        if c.kind in (CATEGORICAL, BINARY):
            levels = c.levels if c.kind == CATEGORICAL else ("0", "1")
            rows.append(PredictorRow(name, levels[0], 1.0, 1.0, 1.0, math.nan, True))
            terms = [(lev, 1.0) for lev in levels[1:]]
        else:
            k = float(per_units.get(name, 1.0))
            terms = [(_unit_label(k), k)]
        for term, k in terms:
            b, s = fit.beta[j], se[j]
            p = float(2 * stats.norm.sf(abs(b / s)))
            rows.append(PredictorRow(name, term, float(np.exp(k * b)), float(np.exp(k * (b - z975 * s))),
                                     float(np.exp(k * (b + z975 * s))), p))
            j += 1
    score = Xu @ fit.beta
    return PredictorModel(tuple(names), tuple(rows), glm.auc(score, yu), n_used, fit.augmented)


def missingness_predictors(d: Dataset, mask, candidates: Sequence[str],
                           per_units: Mapping[str, float] | None = None,
                           adjusted: bool = False) -> PredictorReport:
    """Crude logistic models of ``mask`` on each candidate (rows with the candidate observed)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (d.n_rows,):
        raise DataError("mask length must equal the number of rows")
    if mask.all() or not mask.any():
        raise DataError("mask must contain both complete and incomplete rows")
    d.check_names(candidates)
    per_units = dict(per_units or {})
    crude = [_fit_predictors(d, mask, [c], per_units) for c in candidates]
    adj = _fit_predictors(d, mask, list(candidates), per_units) if adjusted and candidates else None
    return PredictorReport(crude, adj, per_units)
