import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from missplan.dataset import BINARY, CATEGORICAL, CONTINUOUS
from missplan.errors import DataError, IncompatibleModelError, PlanError
from missplan.mice import (ASCENDING_MISSINGNESS, BAYES_LINEAR, LOGISTIC, MULTINOMIAL, PMM,
                           ChainState, ImputationConfig, ImputationPlan, VariableImputationSpec,
                           chain_seed, impute_all, impute_variable_step, initialize_chain,
                           pmm_match, resolve_visits, run_chain)

from conftest import make_dataset


def _mixed(n=300, seed=0, miss=0.25):
    r = np.random.default_rng(seed)
    x = r.normal(size=n)
    z = r.normal(size=n)
    b = (r.random(n) < 1 / (1 + np.exp(-(0.5 * x + z)))).astype(int)
    c = r.integers(0, 3, size=n)
    y = 1 + x + b + 0.5 * z + r.normal(size=n)

    def holes(v):
        v = list(v)
        for i in np.nonzero(r.random(n) < miss)[0]:
            v[i] = None
        return v

    d = make_dataset({"y": holes(y), "x": x.tolist(), "z": z.tolist(), "b": holes(b),
                      "c": holes(c), "p": holes(np.round(x * 3) / 3)},
                     {"y": CONTINUOUS, "x": CONTINUOUS, "z": CONTINUOUS, "b": BINARY,
                      "c": CATEGORICAL, "p": CONTINUOUS},
                     derived=[("y_sq", "y", 2)], levels={"c": ("lo", "mid", "hi")})
    specs = (VariableImputationSpec("y", BAYES_LINEAR), VariableImputationSpec("b", LOGISTIC),
             VariableImputationSpec("c", MULTINOMIAL), VariableImputationSpec("p", PMM, k=5))
    return d, specs


def _plan(specs, M=3, burn_in=3, seed=1, analysis=()):
    return ImputationPlan(tuple(specs), ImputationConfig(M, burn_in, seed), tuple(analysis))


# ---- validation

def test_config_invariants():
    with pytest.raises(PlanError):
        ImputationConfig(M=1)
    with pytest.raises(PlanError):
        ImputationConfig(burn_in=0)
    with pytest.raises(PlanError):
        VariableImputationSpec("a", PMM, k=0)
    with pytest.raises(PlanError):
        VariableImputationSpec("a", BAYES_LINEAR, offset_delta=1.0)
    with pytest.raises(PlanError):
        VariableImputationSpec("a", LOGISTIC, offset_delta=math.nan)


def test_incomplete_variable_needs_a_model():
    d, specs = _mixed()
    with pytest.raises(PlanError, match="without an imputation model"):
        resolve_visits(d, _plan(specs[:2]))


def test_method_must_suit_kind():
    d, _ = _mixed()
    with pytest.raises(PlanError):
        resolve_visits(d, _plan([VariableImputationSpec("b", BAYES_LINEAR)]))


def test_include_must_be_derived_term():
    d, specs = _mixed()
    bad = (VariableImputationSpec("y", BAYES_LINEAR, include=("x",)),) + specs[1:]
    with pytest.raises(PlanError):
        resolve_visits(d, _plan(bad))


def test_compatibility_guard():
    d, specs = _mixed()
    # every model omits z, so the analysis variable z is in no imputation model
    no_z = [VariableImputationSpec(s.target, s.method, s.k, omit=("z",)) for s in specs]
    with pytest.raises(IncompatibleModelError):
        resolve_visits(d, _plan(no_z, analysis=("y", "b", "z")))
    resolve_visits(d, _plan(specs, analysis=("y", "b", "z")))


def test_variable_with_no_observed_values():
    d = make_dataset({"y": [None, None, None], "x": [1.0, 2.0, 3.0]},
                     {"y": CONTINUOUS, "x": CONTINUOUS})
    with pytest.raises(DataError):
        resolve_visits(d, _plan([VariableImputationSpec("y", BAYES_LINEAR)]))


# ---- initialization

def test_initialize_no_missing_equals_input(rng):
    d = make_dataset({"a": [1.0, 2.0], "b": [0, 1]}, {"a": CONTINUOUS, "b": BINARY})
    st_ = initialize_chain(d, _plan([]), rng)
    assert st_.to_dataset().cells_equal(d)


def test_initialize_degenerate_marginal():
    d = make_dataset({"b": [1, None, 1, None], "x": [0.0, 1.0, 2.0, 3.0]},
                     {"b": BINARY, "x": CONTINUOUS})
    st_ = initialize_chain(d, _plan([VariableImputationSpec("b", LOGISTIC)]),
                           np.random.default_rng(3))
    assert np.all(st_.values["b"] == 1)


def test_initialize_deterministic_and_from_observed_values():
    d, specs = _mixed()
    a = initialize_chain(d, _plan(specs), np.random.default_rng(4)).to_dataset()
    b = initialize_chain(d, _plan(specs), np.random.default_rng(4)).to_dataset()
    assert a.cells_equal(b)
    obs_y = set(d["y"].values[d["y"].observed])
    assert set(a["y"].values) <= obs_y
    assert np.allclose(a["y_sq"].values, a["y"].values ** 2)


# ---- single steps

def test_zero_offset_equals_no_offset():
    d, specs = _mixed()
    plan = _plan(specs)
    visits = dict((s.target, p) for s, p in resolve_visits(d, plan))
    out = []
    for spec in (VariableImputationSpec("b", LOGISTIC), VariableImputationSpec("b", LOGISTIC, offset_delta=0.0)):
        st_ = initialize_chain(d, plan, np.random.default_rng(5))
        impute_variable_step(st_, spec, np.random.default_rng(6), visits["b"])
        out.append(st_.values["b"].copy())
    assert np.array_equal(out[0], out[1])


def test_large_offset_imputes_nearly_all_ones():
    d, specs = _mixed(n=2000, seed=2)
    plan = _plan(specs)
    visits = dict((s.target, p) for s, p in resolve_visits(d, plan))
    st_ = initialize_chain(d, plan, np.random.default_rng(5))
    impute_variable_step(st_, VariableImputationSpec("b", LOGISTIC, offset_delta=10.0),
                         np.random.default_rng(6), visits["b"])
    mis = ~d["b"].observed
    assert st_.values["b"][mis].mean() > 0.99
    st2 = initialize_chain(d, plan, np.random.default_rng(5))
    impute_variable_step(st2, VariableImputationSpec("b", LOGISTIC, offset_delta=math.inf),
                         np.random.default_rng(6), visits["b"])
    assert np.all(st2.values["b"][mis] == 1)


def test_bayes_linear_exact_line_when_no_residual_noise():
    x = np.arange(12, dtype=float)
    y = [2 + 3 * v if i % 3 else None for i, v in enumerate(x)]
    d = make_dataset({"y": y, "x": x.tolist()}, {"y": CONTINUOUS, "x": CONTINUOUS})
    plan = _plan([VariableImputationSpec("y", BAYES_LINEAR)])
    st_ = initialize_chain(d, plan, np.random.default_rng(0))
    impute_variable_step(st_, plan.specs[0], np.random.default_rng(1), ["x"])
    mis = ~d["y"].observed
    assert np.allclose(st_.values["y"][mis], 2 + 3 * x[mis], atol=1e-9)


def test_step_uses_originally_observed_rows_only():
    # a wildly wrong initial fill must not leak into the fit
    x = np.arange(20, dtype=float)
    y = [1 + 2 * v if i % 2 else None for i, v in enumerate(x)]
    d = make_dataset({"y": y, "x": x.tolist()}, {"y": CONTINUOUS, "x": CONTINUOUS})
    plan = _plan([VariableImputationSpec("y", BAYES_LINEAR)])
    st_ = ChainState(d)
    st_.values["y"][~d["y"].observed] = 1e6
    impute_variable_step(st_, plan.specs[0], np.random.default_rng(1), ["x"])
    assert np.allclose(st_.values["y"][~d["y"].observed], 1 + 2 * x[~d["y"].observed], atol=1e-8)


# ---- predictive mean matching

def test_pmm_k1_nearest():
    r = np.random.default_rng(0)
    assert pmm_match([0, 1, 2, 3, 4], 2.2, [10, 11, 12, 13, 14], 1, r) == 12


def test_pmm_tie_goes_to_lowest_index():
    preds = np.array([9, 9, 9, 1.0, 9, 9, 9, 3.0, 9])
    vals = np.arange(100, 109)
    for seed in range(20):
        assert pmm_match(preds, 2.0, vals, 1, np.random.default_rng(seed)) == 103


def test_pmm_fewer_donors_than_k():
    with pytest.raises(DataError):
        pmm_match([0.0, 1.0], 0.5, [1, 2], 3, np.random.default_rng(0))


def test_pmm_membership_exhaustive():
    seen = set()
    for seed in range(500):
        v = pmm_match([0, 1, 2, 3, 4], 1.9, [10, 11, 12, 13, 14], 5, np.random.default_rng(seed))
        assert v in {10, 11, 12, 13, 14}
        seen.add(int(v))
    assert seen == {10, 11, 12, 13, 14}


def _pmm_oracle(donor_preds, t, k):
    order = sorted(range(len(donor_preds)), key=lambda i: (abs(donor_preds[i] - t), i))
    return order[:k]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.integers(-6, 6), st.integers(1, 4),
       st.integers(0, 10_000))
def test_pmm_picks_from_oracle_donor_set(preds, t, k, seed):
    if k > len(preds):
        k = len(preds)
    vals = np.arange(len(preds)) * 10
    allowed = {vals[i] for i in _pmm_oracle(preds, t, k)}
    assert pmm_match(np.array(preds, float), float(t), vals, k, np.random.default_rng(seed)) in allowed


# ---- chains

def test_burn_in_one_fits_once():
    d, specs = _mixed()
    d2 = make_dataset({"y": [d["y"].values[i] if d["y"].observed[i] else None for i in range(d.n_rows)],
                       "x": d["x"].values.tolist()}, {"y": CONTINUOUS, "x": CONTINUOUS})
    trace = []
    run_chain(d2, _plan([VariableImputationSpec("y", BAYES_LINEAR)], burn_in=1), 0, trace=trace)
    assert len(trace) == 1 and trace[0]["target"] == "y"


def test_run_chain_reproducible_and_chains_differ():
    d, specs = _mixed()
    plan = _plan(specs)
    a = run_chain(d, plan, 0, 7)
    b = run_chain(d, plan, 0, 7)
    c = run_chain(d, plan, 1, 7)
    assert a.cells_equal(b)
    assert not a.cells_equal(c)


def test_chain_seed_mixing():
    assert chain_seed(1, 0) == chain_seed(1, 0)
    assert len({chain_seed(1, m) for m in range(50)}) == 50
    assert chain_seed(1, 1) != chain_seed(2, 0)


def test_visit_order_ascending_missingness():
    d, specs = _mixed()
    plan = ImputationPlan(specs, ImputationConfig(2, 1, 0, ASCENDING_MISSINGNESS))
    order = [s.target for s, _ in resolve_visits(d, plan)]
    counts = [d[t].n_missing for t in order]
    assert counts == sorted(counts)


@pytest.fixture(scope="module")
def imputed():
    d, specs = _mixed(n=400, seed=11)
    return d, impute_all(d, _plan(specs, M=4, burn_in=3, seed=99))


def test_imputation_set_invariants(imputed):
    d, s = imputed
    assert s.M == 4
    for name in ("y", "b", "c", "p"):
        assert np.array_equal(s.imputed[name], ~d[name].observed)
    for ds in s.datasets:
        for col in ds.columns:
            assert col.observed.all()
            src = d[col.name]
            assert np.array_equal(col.values[src.observed], src.values[src.observed])
        assert set(np.unique(ds["b"].values)) <= {0.0, 1.0}
        assert set(np.unique(ds["c"].values)) <= {0.0, 1.0, 2.0}
        assert set(ds["p"].values) <= set(d["p"].values[d["p"].observed])
        assert np.allclose(ds["y_sq"].values, ds["y"].values ** 2)


def test_threads_do_not_change_results():
    d, specs = _mixed(n=200, seed=3)
    plan = _plan(specs, M=4)
    a = impute_all(d, plan, threads=1)
    b = impute_all(d, plan, threads=3)
    assert all(x.cells_equal(y) for x, y in zip(a.datasets, b.datasets))
    assert a.chain_seeds == b.chain_seeds


def test_no_missing_data_gives_identical_copies():
    d = make_dataset({"a": [1.0, 2.0, 3.0], "b": [0, 1, 1]}, {"a": CONTINUOUS, "b": BINARY})
    s = impute_all(d, _plan([VariableImputationSpec("a", BAYES_LINEAR)], M=5))
    assert s.M == 5 and all(ds.cells_equal(d) for ds in s.datasets)


def test_case_study_configuration_accepted():
    cfg = ImputationConfig(M=100, burn_in=20, seed=5432127)
    assert cfg.M == 100 and cfg.burn_in == 20


def test_too_few_observed_rows():
    # two observed rows cannot support the model for y
    d = make_dataset({"y": [1.0, 2.0, None, None, None], "x": [1.0, 2.0, 3.0, 4.0, 5.0],
                      "w": [1.0, 0.0, 2.0, 1.0, 3.0]},
                     {"y": CONTINUOUS, "x": CONTINUOUS, "w": CONTINUOUS})
    with pytest.raises(DataError):
        impute_all(d, _plan([VariableImputationSpec("y", BAYES_LINEAR)]))


def test_chain_failure_reports_index(monkeypatch):
    import missplan.mice as mice
    from missplan.errors import NumericalError

    real = mice.run_chain

    def flaky(d, plan, m, *a, **kw):
        if m == 2:
            raise NumericalError("boom")
        return real(d, plan, m, *a, **kw)

    monkeypatch.setattr(mice, "run_chain", flaky)
    d, specs = _mixed(n=100)
    with pytest.raises(NumericalError, match="chain 2: boom"):
        impute_all(d, _plan(specs, M=4))


def test_save_writes_csvs_and_manifest(tmp_path, imputed):
    _, s = imputed
    files = s.save(tmp_path)
    assert len(files) == s.M + 1
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["M"] == 4 and man["imputed_mask_sha256"] == s.mask_digest()
    assert len(man["chain_seeds"]) == 4


def test_mcar_imputed_means_match_observed_means():
    r = np.random.default_rng(123)
    n = 10_000
    x = r.normal(size=n)
    y = 2 + x + r.normal(size=n)
    b = (r.random(n) < 1 / (1 + np.exp(-x))).astype(float)
    my = r.random(n) < 0.3
    mb = r.random(n) < 0.3
    d = make_dataset({"y": [None if m else v for v, m in zip(y, my)], "x": x.tolist(),
                      "b": [None if m else int(v) for v, m in zip(b, mb)]},
                     {"y": CONTINUOUS, "x": CONTINUOUS, "b": BINARY})
    s = impute_all(d, _plan([VariableImputationSpec("y", BAYES_LINEAR),
                             VariableImputationSpec("b", LOGISTIC)], M=2, burn_in=2))
    for name, mask in (("y", my), ("b", mb)):
        obs = d[name].values[~mask]
        imp = s.datasets[0][name].values[mask]
        se = math.sqrt(obs.var(ddof=1) / obs.size + imp.var(ddof=1) / imp.size)
        assert abs(imp.mean() - obs.mean()) < 4 * se
