import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from missplan.dataset import BINARY, CATEGORICAL, CONTINUOUS
from missplan.errors import DataError, NumericalError, PlanError
from missplan.formatting import fmt_ci, fmt_p
from missplan.mice import (BAYES_LINEAR, LOGISTIC, ImputationConfig, ImputationPlan,
                           VariableImputationSpec, impute_all)
from missplan.pooling import (AnalysisModelSpec, analyze_imputations, complete_records_analysis,
                              fit_analysis_model, pool_rubin)

from conftest import make_dataset


def test_rubin_hand_example():
    r = pool_rubin([1.0, 2.0], [0.5, 0.5])
    assert r.q_bar == 1.5 and r.w_bar == 0.5 and r.b == 0.5 and r.t == 1.25
    assert r.df == pytest.approx((1 + 0.5 / 0.75) ** 2, abs=1e-12)
    assert r.df == pytest.approx(2.7777777777777777, abs=1e-12)
    half = stats.t.ppf(0.975, r.df) * math.sqrt(1.25)
    assert r.ci_low == pytest.approx(1.5 - half, abs=1e-12)
    assert r.p == pytest.approx(2 * stats.t.sf(1.5 / math.sqrt(1.25), r.df), abs=1e-12)


def test_rubin_barnard_rubin_hand_example():
    nu = 20.0
    r = pool_rubin([1.0, 2.0], [0.5, 0.5], nu_com=nu)
    lam = 0.75 / 1.25
    df_obs = (nu + 1) / (nu + 3) * nu * (1 - lam)
    df_classic = (1 + 0.5 / 0.75) ** 2
    assert r.df == pytest.approx(1 / (1 / df_classic + 1 / df_obs), abs=1e-12)


def test_rubin_identical_estimates():
    r = pool_rubin([0.3, 0.3, 0.3], [0.1, 0.1, 0.1], nu_com=50)
    assert r.b == 0.0 and r.t == r.w_bar and r.q_bar == 0.3 and r.df == 50
    assert math.isinf(pool_rubin([0.3, 0.3], [0.1, 0.1]).df)


def test_rubin_errors():
    with pytest.raises(DataError):
        pool_rubin([1.0], [0.1])
    with pytest.raises(DataError):
        pool_rubin([1.0, 2.0], [0.1, -0.1])


vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=12)


@settings(max_examples=60, deadline=None)
@given(vec, st.integers(0, 10_000))
def test_rubin_permutation_invariant_and_invariants(ests, seed):
    r = np.random.default_rng(seed)
    var = list(r.uniform(0, 2, size=len(ests)))
    a = pool_rubin(ests, var)
    perm = r.permutation(len(ests))
    b = pool_rubin([ests[i] for i in perm], [var[i] for i in perm])
    assert (a.q_bar, a.w_bar) == (b.q_bar, b.w_bar)
    assert a.b == pytest.approx(b.b, rel=1e-12, abs=1e-300)
    assert a.t >= a.w_bar
    assert a.t == a.w_bar + (1 + 1 / a.M) * a.b
    assert a.ci_low <= a.q_bar <= a.ci_high
    assert a.q_bar == pytest.approx(math.fsum(ests) / len(ests), abs=1e-9)


def _ana(n=200, seed=0):
    r = np.random.default_rng(seed)
    e = (r.random(n) < 0.4).astype(int)
    c = r.normal(size=n)
    y = 1 + 2 * e + 0.5 * c + r.normal(size=n)
    return make_dataset({"y": y.tolist(), "e": e.tolist(), "c": c.tolist()},
                        {"y": CONTINUOUS, "e": BINARY, "c": CONTINUOUS})


def test_fit_outcome_equals_exposure():
    d = make_dataset({"y": [0.0, 1.0, 2.0, 3.0], "x": [0.0, 1.0, 2.0, 3.0]},
                     {"y": CONTINUOUS, "x": CONTINUOUS})
    est, var, nu = fit_analysis_model(d, AnalysisModelSpec("y", "x"))
    assert est == pytest.approx(1.0, abs=1e-14) and var == pytest.approx(0.0, abs=1e-28) and nu == 2


def test_orthogonal_covariate_leaves_estimate_unchanged():
    x = np.array([-2, -1, 0, 1, 2, -2, -1, 0, 1, 2.0])
    y = np.array([1, 0, 2, 5, 3, 0, 1, 1, 4, 6.0])
    y = y - y.mean()
    # orthogonal to 1, x and y by construction (projection)
    raw = np.arange(10.0) ** 2
    B = np.column_stack([np.ones(10), x, y])
    w = raw - B @ np.linalg.lstsq(B, raw, rcond=None)[0]
    base = make_dataset({"y": y.tolist(), "x": x.tolist()}, {"y": CONTINUOUS, "x": CONTINUOUS})
    more = make_dataset({"y": y.tolist(), "x": x.tolist(), "w": w.tolist()},
                        {"y": CONTINUOUS, "x": CONTINUOUS, "w": CONTINUOUS})
    a = fit_analysis_model(base, AnalysisModelSpec("y", "x"))[0]
    b = fit_analysis_model(more, AnalysisModelSpec("y", "x", ("w",)))[0]
    assert a == pytest.approx(b, abs=1e-8)
    assert a == pytest.approx(x @ y / (x @ x), abs=1e-12)


def test_categorical_covariate_expands():
    d = make_dataset({"y": [1.0, 2, 3, 4, 5, 7], "x": [0.0, 1, 0, 1, 0, 1],
                      "g": ["a", "b", "c", "a", "b", "c"]},
                     {"y": CONTINUOUS, "x": CONTINUOUS, "g": CATEGORICAL}, levels={"g": ("a", "b", "c")})
    _, _, nu = fit_analysis_model(d, AnalysisModelSpec("y", "x", ("g",)))
    assert nu == 6 - 4


def test_spec_validation():
    d = _ana()
    with pytest.raises(PlanError):
        AnalysisModelSpec("e", "y").validate(d)
    with pytest.raises(PlanError):
        AnalysisModelSpec("y", "y").validate(d)
    AnalysisModelSpec("y", "e", ("c",)).validate(d)


def test_cca_without_missing_equals_full_fit():
    d = _ana()
    spec = AnalysisModelSpec("y", "e", ("c",))
    est, var, nu = fit_analysis_model(d, spec)
    r = complete_records_analysis(d, spec)
    assert (r.q_bar, r.t, r.df, r.b, r.M) == (est, var, nu, 0.0, 1)
    q = stats.t.ppf(0.975, nu) * math.sqrt(var)
    assert r.ci_low == pytest.approx(est - q, abs=1e-12)


def test_cca_ignores_incomplete_rows():
    d = _ana(50)
    spec = AnalysisModelSpec("y", "e", ("c",))
    y = d["y"].values.tolist()
    c = d["c"].values.tolist()
    y2 = y + [None, 99.0]
    c2 = c + [4.0, None]
    e2 = d["e"].values.astype(int).tolist() + [1, 0]
    d2 = make_dataset({"y": y2, "e": e2, "c": c2}, {"y": CONTINUOUS, "e": BINARY, "c": CONTINUOUS})
    assert complete_records_analysis(d, spec) == complete_records_analysis(d2, spec)


def test_cca_too_few_records():
    d = make_dataset({"y": [1.0, None, 2.0], "x": [1.0, 2.0, None]}, {"y": CONTINUOUS, "x": CONTINUOUS})
    with pytest.raises(NumericalError):
        complete_records_analysis(d, AnalysisModelSpec("y", "x"))


def test_mi_on_complete_data_equals_single_fit():
    d = _ana()
    spec = AnalysisModelSpec("y", "e", ("c",))
    plan = ImputationPlan((VariableImputationSpec("e", LOGISTIC),), ImputationConfig(5, 2, 3))
    r = analyze_imputations(impute_all(d, plan), spec)
    est, var, nu = fit_analysis_model(d, spec)
    assert r.b == 0.0 and r.q_bar == est and r.t == var and r.df == nu
    cca = complete_records_analysis(d, spec)
    assert (r.q_bar, r.t, r.ci_low, r.ci_high, r.p) == (cca.q_bar, cca.t, cca.ci_low, cca.ci_high, cca.p)


@pytest.mark.parametrize("scale", [3.0, 0.25])
def test_outcome_scaling(scale):
    d = _ana(120, seed=4)
    r = np.random.default_rng(0)
    y = d["y"].values.copy()
    hole = r.random(y.size) < 0.3
    obs = ~hole
    spec = AnalysisModelSpec("y", "e", ("c",))
    plan = ImputationPlan((VariableImputationSpec("y", BAYES_LINEAR),), ImputationConfig(4, 2, 8))
    base = d.replace({"y": (y, obs)})
    scaled = d.replace({"y": (y * scale, obs)})
    for fn in (lambda dd: complete_records_analysis(dd, spec),
               lambda dd: analyze_imputations(impute_all(dd, plan), spec)):
        a, b = fn(base), fn(scaled)
        assert b.q_bar == pytest.approx(scale * a.q_bar, rel=1e-9)
        assert b.t == pytest.approx(scale ** 2 * a.t, rel=1e-9)


def test_cca_negative_scaling():
    d = _ana(80, seed=6)
    spec = AnalysisModelSpec("y", "e", ("c",))
    a = complete_records_analysis(d, spec)
    b = complete_records_analysis(d.replace({"y": (-2 * d["y"].values, d["y"].observed)}), spec)
    assert b.q_bar == pytest.approx(-2 * a.q_bar, rel=1e-12)
    assert b.t == pytest.approx(4 * a.t, rel=1e-12)


def test_case_study_result_formats():
    assert f"{fmt_ci(-10.8, -12.2, -9.4)}, p{fmt_p(1e-6)}" == "-10.8 (-12.2, -9.4), p<0.001"
    assert fmt_ci(-7.93, -9.08, -6.71) == "-7.9 (-9.1, -6.7)"
