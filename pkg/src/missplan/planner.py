"""Advisory strategy selection for handling missing data.

Three questions are answered in order: is a complete-records analysis
likely to be valid (Q1), is multiple imputation likely to help (Q2), and is
a sensitivity analysis for departures from MAR needed (Q3). Verdicts carry
machine-readable reason codes and are advice only.
"""

from __future__ import annotations

from dataclasses import dataclass

from .diagnostics import MissingSummary, PredictorReport
from .formatting import fmt_num, markdown_table

YES, NO, UNCERTAIN = "yes", "no", "uncertain"

FULL_DATA = "full-data analysis"
CCA = "complete records analysis"
MI = "multiple imputation"
DELTA = "delta-adjusted sensitivity analysis"

REASON_TEXT = {
    "Q1_NO_MISSING_DATA": "No analysis-model variable has missing data.",
    "Q1_LOW_MISSINGNESS": "Fewer incomplete records than the threshold; handling matters little.",
    "Q1_MISSINGNESS_UNRELATED_TO_OUTCOME": "Missingness is judged unrelated to the outcome given the model covariates.",
    "Q1_MISSINGNESS_RELATED_TO_OUTCOME": "Missingness is judged related to the outcome; complete records are likely biased.",
    "Q1_OUTCOME_ASSOCIATION_UNKNOWN": "No judgement on whether missingness relates to the outcome.",
    "Q1_OUTCOME_ASSOCIATION_FROM_PREDICTORS": "Outcome association was pre-filled from the predictors-of-missingness report.",
    "Q2_BELOW_THRESHOLD": "Too few incomplete records for imputation to gain much.",
    "Q2_AUXILIARIES_AVAILABLE": "Auxiliary variables can recover information about the missing values.",
    "Q2_COVARIATE_MISSINGNESS": "Missingness affects exposure or covariates, whose other variables carry information.",
    "Q2_OUTCOME_ONLY_NO_AUXILIARIES": "Only the outcome is incomplete and no auxiliaries exist; imputation adds no information.",
    "Q3_MNAR_SUSPECTED": "Missingness may depend on the unobserved values themselves.",
    "Q3_MAR_PLAUSIBLE": "MAR is judged plausible; no MNAR sensitivity analysis planned.",
}


@dataclass(frozen=True)
class Verdict:
    answer: str
    reasons: tuple[str, ...]


@dataclass(frozen=True)
class PlannerFlags:
    outcome_missingness_assoc: bool | None = None
    auxiliaries_available: bool = False
    mnar_suspected: bool = False
    outcome: str | None = None


@dataclass(frozen=True)
class StrategyAdvice:
    q1_cca_valid: Verdict
    q2_mi_beneficial: Verdict
    q3_sensitivity_needed: Verdict
    recommendation: tuple[str, ...]
    pct_incomplete: float
    threshold: float

    def to_markdown(self) -> str:
        rows = []
        for q, label, v in (("Q1", "Is a complete records analysis likely to be valid?", self.q1_cca_valid),
                            ("Q2", "Is multiple imputation likely to be beneficial?", self.q2_mi_beneficial),
                            ("Q3", "Is a sensitivity analysis for MNAR needed?", self.q3_sensitivity_needed)):
            reasons = "; ".join(f"`{r}` {REASON_TEXT[r]}" for r in v.reasons)
            rows.append([q, label, v.answer, reasons])
        text = (f"Incomplete records: {fmt_num(self.pct_incomplete, 1)}% "
                f"(threshold {fmt_num(self.threshold, 1)}%).\n\n")
        text += markdown_table(["", "Question", "Verdict", "Reasons"], rows)
        text += "\n\nRecommended analyses (primary first):\n\n"
        text += "\n".join(f"{i}. {a}" for i, a in enumerate(self.recommendation, 1))
        return text


def _assoc_from_predictors(predictors: PredictorReport | None, outcome: str | None) -> bool | None:
    if predictors is None or outcome is None:
        return None
    try:
        m = predictors.model_for(outcome)
    except KeyError:
        return None
    return any(not r.reference and not (r.ci_low <= 1.0 <= r.ci_high) for r in m.rows)


def advise(summary: MissingSummary, predictors: PredictorReport | None = None,
           flags: PlannerFlags = PlannerFlags(), threshold: float = 5.0) -> StrategyAdvice:
    pct = summary.pct_incomplete_records
    if summary.n_complete_records == summary.n_rows:
        q1 = Verdict(YES, ("Q1_NO_MISSING_DATA",))
        return StrategyAdvice(q1, Verdict(NO, ("Q1_NO_MISSING_DATA",)),
                              Verdict(NO, ("Q1_NO_MISSING_DATA",)), (FULL_DATA,), pct, threshold)

    assoc = flags.outcome_missingness_assoc
    prefilled = False
    if assoc is None:
        assoc = _assoc_from_predictors(predictors, flags.outcome)
        prefilled = assoc is not None

    if pct < threshold:
        q1 = Verdict(YES, ("Q1_LOW_MISSINGNESS",))
    elif assoc is False:
        q1 = Verdict(YES, ("Q1_MISSINGNESS_UNRELATED_TO_OUTCOME",))
    elif assoc is True:
        q1 = Verdict(NO, ("Q1_MISSINGNESS_RELATED_TO_OUTCOME",))
    else:
        q1 = Verdict(UNCERTAIN, ("Q1_OUTCOME_ASSOCIATION_UNKNOWN",))
    if prefilled and pct >= threshold:
        q1 = Verdict(q1.answer, q1.reasons + ("Q1_OUTCOME_ASSOCIATION_FROM_PREDICTORS",))

    covariate_missing = any(v.n_missing > 0 for v in summary.variables if v.name != flags.outcome)
    if pct < threshold:
        q2 = Verdict(NO, ("Q2_BELOW_THRESHOLD",))
    elif flags.auxiliaries_available or covariate_missing:
        reasons = []
        if flags.auxiliaries_available:
            reasons.append("Q2_AUXILIARIES_AVAILABLE")
        if covariate_missing:
            reasons.append("Q2_COVARIATE_MISSINGNESS")
        q2 = Verdict(YES, tuple(reasons))
    else:
        q2 = Verdict(NO, ("Q2_OUTCOME_ONLY_NO_AUXILIARIES",))

    q3 = Verdict(YES, ("Q3_MNAR_SUSPECTED",)) if flags.mnar_suspected else Verdict(NO, ("Q3_MAR_PLAUSIBLE",))

    rec = [MI, CCA] if q2.answer == YES else [CCA]
    if q3.answer == YES:
        rec.append(DELTA)
    return StrategyAdvice(q1, q2, q3, tuple(rec), pct, threshold)
