"""Synthetic data with known truth, and a Monte Carlo experiment runner.

The generated data have four columns:

* ``covariate`` - standard normal confounder,
* ``auxiliary`` - standard normal, predicts the exposure but not the outcome,
* ``exposure`` - Bernoulli(expit(a0 + a1*covariate + a2*auxiliary)),
* ``outcome`` - b0 + b1*exposure + b2*covariate + N(0, sd^2).

Missingness is then imposed as MCAR, MAR or pattern-mixture MNAR. Under
``mnar_pm`` the missingness indicator depends only on covariate and
auxiliary, and exposures of rows flagged missing are redrawn with their
log-odds shifted by ``delta_true`` before the outcome is generated. The
exposure given everything else is then logistic with the same slope in
both patterns and an intercept that differs by exactly ``delta_true``,
while the outcome model (and so b1) is identical in both patterns.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import BINARY, CONTINUOUS, Column, Dataset
from .errors import DataError, PlanError
from .formatting import fmt_num, markdown_table
from .mice import (BAYES_LINEAR, LOGISTIC, ImputationConfig, ImputationPlan,
                   VariableImputationSpec, impute_all)
from .pooling import (AnalysisModelSpec, analyze_imputations, complete_records_analysis,
                      fit_analysis_model, single_result)

MCAR, MAR, MNAR_PM = "mcar", "mar", "mnar_pm"
VARIABLES = ("outcome", "exposure", "covariate", "auxiliary")
ANALYSIS = AnalysisModelSpec("outcome", "exposure", ("covariate",))


@dataclass(frozen=True)
class SimScenario:
    n: int = 5000
    b0: float = 0.0
    b1: float = 1.0
    b2: float = 0.5
    sd: float = 1.0
    a0: float = -0.5
    a1: float = 0.5
    a2: float = 1.5
    mechanism: str = MAR
    rate: float = 0.3
    mcar_vars: tuple[str, ...] = ("exposure",)
    missing_var: str = "exposure"
    mar_intercept: float = 0.0
    mar_outcome: float = 0.0
    mar_exposure: float = 0.0
    mar_covariate: float = 0.0
    mar_auxiliary: float = 0.0
    delta_true: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise PlanError("n must be at least 10", "simulation.n")
        if not self.sd > 0:
            raise PlanError("sd must be positive", "simulation.sd")
        if self.mechanism not in (MCAR, MAR, MNAR_PM):
            raise PlanError(f"unknown mechanism {self.mechanism!r}", "simulation.mechanism")
        if self.mechanism == MCAR:
            if not 0 <= self.rate < 1:
                raise PlanError("MCAR rate must lie in [0, 1)", "simulation.rate")
            bad = [v for v in self.mcar_vars if v not in VARIABLES]
            if bad:
                raise PlanError(f"unknown variable(s) {bad}", "simulation.mcar_vars")
            return
        if self.missing_var not in ("exposure", "outcome"):
            raise PlanError("missing_var must be 'exposure' or 'outcome'", "simulation.missing_var")
        if self.missing_var == "exposure" and self.mar_exposure != 0:
            raise PlanError("exposure missingness cannot depend on the exposure under MAR",
                            "simulation.mar_exposure")
        if self.missing_var == "outcome" and self.mar_outcome != 0:
            raise PlanError("outcome missingness cannot depend on the outcome under MAR",
                            "simulation.mar_outcome")
        if self.mechanism == MNAR_PM:
            if self.missing_var != "exposure":
                raise PlanError("pattern-mixture MNAR applies to the exposure", "simulation.missing_var")
            if self.mar_outcome != 0:
                raise PlanError("pattern-mixture MNAR needs missingness independent of the outcome",
                                "simulation.mar_outcome")
            if not math.isfinite(self.delta_true):
                raise PlanError("delta_true must be finite", "simulation.delta_true")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SimScenario":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise PlanError(f"unknown field(s) {sorted(unknown)}", "simulation.scenario")
        kw = dict(raw)
        if "mcar_vars" in kw:
            kw["mcar_vars"] = tuple(kw["mcar_vars"])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    data: Dataset
    full: Dataset
    b1: float
    scenario: SimScenario


def _dataset(cols: Mapping[str, np.ndarray], observed: Mapping[str, np.ndarray]) -> Dataset:
    kinds = {"outcome": CONTINUOUS, "exposure": BINARY, "covariate": CONTINUOUS, "auxiliary": CONTINUOUS}
    return Dataset(Column(v, kinds[v], cols[v], observed[v]) for v in VARIABLES)


def generate(s: SimScenario, seed: int | None = None) -> SimulatedData:
    """Draw one dataset; the same (scenario, seed) always gives the same cells."""
    rng = np.random.default_rng(s.seed if seed is None else seed)
    n = s.n
    c = rng.standard_normal(n)
    a = rng.standard_normal(n)
    u_e = rng.random(n)
    eps = rng.standard_normal(n) * s.sd
    u_m = rng.random(n)
    u_mcar = rng.random((len(VARIABLES), n))

    def exposure(shift):
        return (u_e < expit(s.a0 + s.a1 * c + s.a2 * a + shift)).astype(float)

    def outcome(e):
        return s.b0 + s.b1 * e + s.b2 * c + eps

    observed = {v: np.ones(n, dtype=bool) for v in VARIABLES}
    if s.mechanism == MCAR:
        e = exposure(0.0)
        y = outcome(e)
        for v in s.mcar_vars:
            observed[v] = u_mcar[VARIABLES.index(v)] >= s.rate
    elif s.mechanism == MAR:
        e = exposure(0.0)
        y = outcome(e)
        eta = s.mar_intercept + s.mar_outcome * y + s.mar_exposure * e \
            + s.mar_covariate * c + s.mar_auxiliary * a
        observed[s.missing_var] = u_m >= expit(eta)
    else:
        eta = s.mar_intercept + s.mar_covariate * c + s.mar_auxiliary * a
        missing = u_m < expit(eta)
        e = exposure(s.delta_true * missing)
        y = outcome(e)
        observed["exposure"] = ~missing

    cols = {"outcome": y, "exposure": e, "covariate": c, "auxiliary": a}
    for v, obs in observed.items():
        if not obs.any():
            raise DataError("scenario leaves a variable entirely missing", column=v)
    full = _dataset(cols, {v: np.ones(n, dtype=bool) for v in VARIABLES})
    return SimulatedData(_dataset(cols, observed), full, s.b1, s)


@dataclass(frozen=True)
class SimMIConfig:
    M: int = 10
    burn_in: int = 5
    use_auxiliary: bool = True


def imputation_plan_for(d: Dataset, cfg: SimMIConfig, seed: int) -> ImputationPlan:
    specs = []
    for col in d.columns:
        if col.n_missing:
            method = LOGISTIC if col.kind == BINARY else BAYES_LINEAR
            specs.append(VariableImputationSpec(col.name, method))
    return ImputationPlan(tuple(specs), ImputationConfig(cfg.M, cfg.burn_in, seed),
                          ANALYSIS.variables)


def _parse_method(m: str) -> tuple[str, float]:
    if m in ("full", "cca", "mi"):
        return m, 0.0
    if m.startswith("mi_delta="):
        try:
            return "mi", float(m.split("=", 1)[1])
        except ValueError:
            pass
    raise PlanError(f"unknown method {m!r}; use full, cca, mi or mi_delta=<x>", "simulation.methods")


def _run_method(sim: SimulatedData, method: str, cfg: SimMIConfig, mi_seed: int):
    kind, delta = _parse_method(method)
    if kind == "full":
        est, var, nu = fit_analysis_model(sim.full, ANALYSIS)
        return single_result(est, var, nu)
    if kind == "cca":
        return complete_records_analysis(sim.data, ANALYSIS)
    d = sim.data
    if not cfg.use_auxiliary:
        d = Dataset(c for c in d.columns if c.name != "auxiliary")
    plan = imputation_plan_for(d, cfg, mi_seed)
    if delta != 0.0:
        plan = plan.with_delta("exposure", delta)
    return analyze_imputations(impute_all(d, plan), ANALYSIS)


@dataclass(frozen=True)
class MethodSummary:
    method: str
    reps: int
    mean_estimate: float
    bias: float
    bias_mcse: float
    empirical_se: float
    mean_model_se: float
    coverage: float

    @property
    def bias_z(self) -> float:
        return self.bias / self.bias_mcse if self.bias_mcse > 0 else math.inf * np.sign(self.bias)


@dataclass
class ExperimentReport:
    scenario: SimScenario
    true_b1: float
    summaries: list[MethodSummary]
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    model_se: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def summary(self, method: str) -> MethodSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def to_rows(self) -> list[dict]:
        return [{"method": s.method, "reps": s.reps, "true_b1": self.true_b1,
                 "mean_estimate": s.mean_estimate, "bias": s.bias, "bias_mcse": s.bias_mcse,
                 "empirical_se": s.empirical_se, "mean_model_se": s.mean_model_se,
                 "coverage": s.coverage} for s in self.summaries]

    def to_markdown(self) -> str:
        body = [[s.method, str(s.reps), fmt_num(s.mean_estimate, 3), fmt_num(s.bias, 3),
                 fmt_num(s.bias_mcse, 3), fmt_num(s.empirical_se, 3), fmt_num(s.mean_model_se, 3),
                 fmt_num(s.coverage, 3)] for s in self.summaries]
        return markdown_table(["Method", "Reps", "Mean estimate", "Bias", "MC-SE of bias",
                               "Empirical SE", "Mean model SE", "95% CI coverage"], body)


def rep_seeds(seed: int, rep: int) -> tuple[int, int]:
    """(data seed, imputation seed) for replication ``rep``."""
    a, b = np.random.SeedSequence([int(seed), int(rep)]).generate_state(2, np.uint64)
    return int(a), int(b)


def run_experiment(s: SimScenario, methods: Sequence[str] = ("cca", "mi"), reps: int = 200,
                   mi: SimMIConfig = SimMIConfig(), threads: int = 1) -> ExperimentReport:
    """Replicate generate-then-analyze ``reps`` times and summarize each method."""
    if reps < 1:
        raise PlanError("reps must be >= 1", "simulation.reps")
    for m in methods:
        _parse_method(m)

    def one(r: int):
        data_seed, mi_seed = rep_seeds(s.seed, r)
        sim = generate(s, data_seed)
        return [_run_method(sim, m, mi, mi_seed) for m in methods]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(reps)))
    else:
        results = [one(r) for r in range(reps)]

    summaries, estimates, ses = [], {}, {}
    for j, m in enumerate(methods):
        est = np.array([res[j].q_bar for res in results])
        se = np.array([res[j].se for res in results])
        covered = np.array([res[j].ci_low <= s.b1 <= res[j].ci_high for res in results])
        emp = float(np.std(est, ddof=1)) if reps > 1 else math.nan
        summaries.append(MethodSummary(m, reps, float(np.mean(est)), float(np.mean(est) - s.b1),
                                       emp / math.sqrt(reps) if reps > 1 else math.nan, emp,
                                       float(np.mean(se)), float(np.mean(covered))))
        estimates[m], ses[m] = est, se
    return ExperimentReport(s, s.b1, summaries, estimates, ses)
