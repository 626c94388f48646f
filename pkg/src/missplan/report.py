"""Markdown report assembly with CSV companions.

The report body is a pure function of its inputs; timestamps belong in the
run manifest only. Each rendered number has a full-precision CSV twin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .diagnostics import ComparisonTable, MissingSummary, PatternTable, PredictorReport
from .formatting import fmt_ci, fmt_num, fmt_p, markdown_table
from .planner import StrategyAdvice
from .pooling import PooledResult
from .sensitivity import SensitivityResults

RESULT_COLUMNS = ["method", "delta", "estimate", "se", "ci_low", "ci_high", "p", "df", "M",
                  "w_bar", "b", "pct_imputed_positive"]


@dataclass
class ReportInputs:
    title: str
    plan_lines: Sequence[tuple[str, str]]
    summary: MissingSummary
    patterns: PatternTable | None = None
    comparison: ComparisonTable | None = None
    predictors: PredictorReport | None = None
    advice: StrategyAdvice | None = None
    mi: PooledResult | None = None
    mi_pct_positive: float | None = None
    cca: PooledResult | None = None
    sensitivity: SensitivityResults | None = None
    sensitivity_target: str | None = None
    reproducibility: Sequence[tuple[str, str]] = ()
    augmented_fits: dict = field(default_factory=dict)
    deviations: Sequence[str] = ()


@dataclass
class RenderedReport:
    markdown: str
    tables: dict[str, tuple[list[dict], list[str]]]


def _delta_label(d: float) -> str:
    return "∞" if math.isinf(d) else f"{d:g}"


def _result_row(method: str, r: PooledResult, pct: float | None, delta: float | None = None) -> dict:
    return {"method": method, "delta": delta, "estimate": r.q_bar, "se": r.se, "ci_low": r.ci_low,
            "ci_high": r.ci_high, "p": r.p, "df": r.df, "M": r.M, "w_bar": r.w_bar, "b": r.b,
            "pct_imputed_positive": None if pct is None else 100.0 * pct}


def results_rows(inputs: ReportInputs) -> list[dict]:
    rows = []
    if inputs.mi is not None:
        rows.append(_result_row("Multiple imputation", inputs.mi, inputs.mi_pct_positive))
    if inputs.cca is not None:
        rows.append(_result_row("Complete records", inputs.cca, None))
    if inputs.sensitivity is not None:
        for e in inputs.sensitivity.entries:
            rows.append(_result_row(f"Sensitivity δ={_delta_label(e.delta)}", e.pooled,
                                    e.fraction_imputed_positive, e.delta))
    return rows


def render_report(inputs: ReportInputs) -> RenderedReport:
    """Five fixed sections: plan, missing data, advice, results, reproducibility."""
    results = results_rows(inputs)
    if not results:
        raise ValueError("report needs at least one analysis result")
    tables: dict[str, tuple[list[dict], list[str]]] = {}
    out = [f"# {inputs.title}", ""]

    out += ["## 1. Analysis plan", ""]
    out += [f"- **{k}**: {v}" for k, v in inputs.plan_lines]
    out.append("")

    out += ["## 2. Description of the missing data", ""]
    out += ["### Missingness by variable", "", inputs.summary.to_markdown(), ""]
    tables["missing_summary.csv"] = (inputs.summary.to_rows(),
                                     ["variable", "n_observed", "n_missing", "pct_missing"])
    if inputs.patterns is not None:
        out += ["### Missingness patterns", "", "O = observed, M = missing.", "",
                inputs.patterns.to_markdown(), ""]
        rows = inputs.patterns.to_rows()
        tables["patterns.csv"] = (rows, list(inputs.patterns.variables) + ["n_missing_vars", "count"])
    if inputs.comparison is not None:
        out += ["### Characteristics by completeness", "", inputs.comparison.to_markdown(), ""]
        rows = inputs.comparison.to_rows()
        cols: list[str] = []
        for r in rows:
            cols += [c for c in r if c not in cols]
        tables["comparison.csv"] = (rows, cols)
    if inputs.predictors is not None:
        out += ["### Predictors of being a complete record", "", inputs.predictors.to_markdown(), ""]
        tables["predictors.csv"] = (inputs.predictors.to_rows(),
                                    ["model", "variable", "term", "odds_ratio", "ci_low", "ci_high",
                                     "p", "auc", "n_used", "augmented"])

    if inputs.advice is not None:
        out += ["## 3. Strategy advice", "", inputs.advice.to_markdown(), "",
                "_Advice only; the pre-specified plan governs the analyses reported below._", ""]
        a = inputs.advice
        tables["advice.csv"] = ([{"question": q, "answer": v.answer, "reasons": ";".join(v.reasons)}
                                 for q, v in (("Q1", a.q1_cca_valid), ("Q2", a.q2_mi_beneficial),
                                              ("Q3", a.q3_sensitivity_needed))],
                                ["question", "answer", "reasons"])
    else:
        out += ["## 3. Strategy advice", "", "No advice was requested.", ""]

    out += ["## 4. Results", ""]
    label = "% imputed positive"
    if inputs.sensitivity_target:
        label = f"% of missing {inputs.sensitivity_target} imputed as 1"
    body = []
    for r in results:
        pct = "" if r["pct_imputed_positive"] is None else fmt_num(r["pct_imputed_positive"], 1)
        body.append([r["method"], fmt_ci(r["estimate"], r["ci_low"], r["ci_high"]), fmt_p(r["p"]), pct])
    out += [markdown_table(["Method of analysis", "Coefficient (95% CI)", "p", label], body), ""]
    tables["results.csv"] = (results, RESULT_COLUMNS)
    s = inputs.sensitivity
    if s is not None:
        crit = "interval includes zero" if s.criterion == "ci-crosses-zero" else "estimate changes sign"
        level = fmt_num(100 * (1 - s.alpha), 0)
        if s.tipping_delta is None:
            out.append(f"Tipping point ({crit}, {level}% interval): not reached on the grid.")
        else:
            out.append(f"Tipping point ({crit}, {level}% interval): δ = {_delta_label(s.tipping_delta)}.")
        out.append("")

    out += ["## 5. Reproducibility", ""]
    out += [f"- **{k}**: {v}" for k, v in inputs.reproducibility]
    if inputs.augmented_fits:
        fits = ", ".join(f"{k} ({v})" for k, v in sorted(inputs.augmented_fits.items()))
        out.append(f"- **Augmented imputation fits (perfect prediction)**: {fits}")
    if inputs.deviations:
        out.append("- **Deviations from the plan**:")
        out += [f"  - {d}" for d in inputs.deviations]
    else:
        out.append("- **Deviations from the plan**: none")
    out.append("")
    tables["reproducibility.csv"] = ([{"item": k, "value": v} for k, v in inputs.reproducibility]
                                     + [{"item": "deviation", "value": d} for d in inputs.deviations],
                                     ["item", "value"])
    return RenderedReport("\n".join(out), tables)

