"""Multiple imputation by chained equations (fully conditional specification).

Each imputation is an independent chain: missing cells are first filled from
the observed marginal, then every incomplete variable is re-imputed from its
conditional model for ``burn_in`` cycles. Chain ``m`` draws from its own
random stream seeded from ``(seed, m)``, so results do not depend on how
chains are scheduled.

The number of random draws a step consumes never depends on the data. Two
chains that differ only in the offset applied to one logistic target
therefore see the same uniforms for every cell, which is what the
sensitivity analysis relies on.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import glm
from .dataset import (BINARY, CATEGORICAL, CONTINUOUS, Column, Dataset, power_transform,
                      write_csv)
from .design import build_design
from .errors import DataError, IncompatibleModelError, MissplanError, PlanError

BAYES_LINEAR = "bayes_linear"
LOGISTIC = "logistic"
MULTINOMIAL = "multinomial"
PMM = "pmm"
METHODS = (BAYES_LINEAR, LOGISTIC, MULTINOMIAL, PMM)

_METHOD_KINDS = {
    BAYES_LINEAR: (CONTINUOUS,),
    PMM: (CONTINUOUS,),
    LOGISTIC: (BINARY,),
    MULTINOMIAL: (CATEGORICAL,),
}

AS_CONFIGURED = "as-configured"
ASCENDING_MISSINGNESS = "ascending-missingness"


@dataclass(frozen=True)
class VariableImputationSpec:
    """Conditional model for one incomplete variable.

    ``offset_delta`` shifts the log-odds for rows being imputed (logistic
    targets only). ``math.inf`` imputes every missing cell as 1.
    """

    target: str
    method: str
    k: int = 5
    omit: tuple[str, ...] = ()
    include: tuple[str, ...] = ()
    offset_delta: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise PlanError(f"unknown method {self.method!r}", f"imputation.{self.target}.method")
        if self.k < 1:
            raise PlanError("pmm needs k >= 1", f"imputation.{self.target}.k")
        if math.isnan(self.offset_delta) or self.offset_delta == -math.inf:
            raise PlanError("offset_delta must be finite or +inf", f"imputation.{self.target}")
        if self.offset_delta != 0 and self.method != LOGISTIC:
            raise PlanError("offset_delta is only supported for logistic targets",
                            f"imputation.{self.target}.offset_delta")


@dataclass(frozen=True)
class ImputationConfig:
    M: int = 5
    burn_in: int = 10
    seed: int = 0
    visit_order: str = AS_CONFIGURED

    def __post_init__(self):
        if self.M < 2:
            raise PlanError("M must be >= 2", "imputation.M")
        if self.burn_in < 1:
            raise PlanError("burn_in must be >= 1", "imputation.burn_in")
        if self.visit_order not in (AS_CONFIGURED, ASCENDING_MISSINGNESS):
            raise PlanError(f"unknown visit order {self.visit_order!r}", "imputation.visit_order")


@dataclass(frozen=True)
class ImputationPlan:
    specs: tuple[VariableImputationSpec, ...]
    config: ImputationConfig = ImputationConfig()
    analysis_vars: tuple[str, ...] = ()

    def spec_for(self, target: str) -> VariableImputationSpec:
        for s in self.specs:
            if s.target == target:
                return s
        raise PlanError(f"no imputation model for {target!r}", "imputation.variables")

    def with_delta(self, target: str, delta: float) -> "ImputationPlan":
        self.spec_for(target)
        specs = tuple(replace(s, offset_delta=delta) if s.target == target else s
                      for s in self.specs)
        return replace(self, specs=specs)

    def with_config(self, **changes) -> "ImputationPlan":
        return replace(self, config=replace(self.config, **changes))


def chain_seed(master_seed: int, chain_index: int) -> int:
    """Deterministic 64-bit seed for chain ``chain_index``."""
    ss = np.random.SeedSequence([int(master_seed), int(chain_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def predictors_for(d: Dataset, spec: VariableImputationSpec) -> list[str]:
    """Every other non-derived column, minus ``omit``, plus ``include``."""
    base = [c.name for c in d.columns
            if not c.is_derived and c.name != spec.target and c.name not in spec.omit]
    return base + [n for n in spec.include if n not in base]


def resolve_visits(d: Dataset, plan: ImputationPlan) -> list[tuple[VariableImputationSpec, list[str]]]:
    """Validate ``plan`` against ``d``; return (spec, predictors) in visit order.

    Only variables that actually have missing cells are visited.
    """
    targets = [s.target for s in plan.specs]
    if len(set(targets)) != len(targets):
        raise PlanError("duplicate imputation target", "imputation.variables")
    for i, s in enumerate(plan.specs):
        path = f"imputation.variables[{i}]"
        if s.target not in d:
            raise PlanError(f"unknown target {s.target!r}", path)
        col = d[s.target]
        if col.is_derived:
            raise PlanError("derived columns are refreshed from their source, not imputed", path)
        if col.kind not in _METHOD_KINDS[s.method]:
            raise PlanError(f"method {s.method!r} does not suit a {col.kind} variable", path)
        for n in s.omit:
            if n not in d:
                raise PlanError(f"omit references unknown column {n!r}", path)
        for n in s.include:
            if n not in d:
                raise PlanError(f"include references unknown column {n!r}", path)
            inc = d[n]
            if not inc.is_derived:
                raise PlanError(f"include {n!r} is not a derived term", path)
            if inc.source == s.target:
                raise PlanError(f"include {n!r} is derived from the target itself", path)

    incomplete = [c.name for c in d.columns if not c.is_derived and c.n_missing > 0]
    by_target = {s.target: s for s in plan.specs}
    lacking = [n for n in incomplete if n not in by_target]
    if lacking:
        raise PlanError(f"incomplete variable(s) without an imputation model: {lacking}",
                        "imputation.variables")

    visits = [(s, predictors_for(d, s)) for s in plan.specs if d[s.target].n_missing > 0]
    if plan.config.visit_order == ASCENDING_MISSINGNESS:
        visits.sort(key=lambda sp: d[sp[0].target].n_missing)

    if visits and plan.analysis_vars:
        covered = set()
        for s, preds in visits:
            covered.add(s.target)
            covered.update(preds)
        absent = [v for v in plan.analysis_vars if v not in covered]
        if absent:
            raise IncompatibleModelError(
                f"analysis variable(s) {absent} appear in no imputation model", "imputation")

    for s, preds in visits:
        col = d[s.target]
        p = 1 + sum(len(d[n].levels) - 1 if d[n].kind == CATEGORICAL else 1 for n in preds)
        n_obs = col.observed.size - col.n_missing
        if n_obs == 0:
            raise DataError(f"no observed values to impute from", column=s.target)
        need = p + 1 if s.method in (BAYES_LINEAR, PMM) else p
        if n_obs < need:
            raise DataError(f"{n_obs} observed rows is too few for a model with {p} parameters",
                            column=s.target)
        if s.method == PMM and n_obs < s.k:
            raise DataError(f"pmm needs at least k={s.k} donors, have {n_obs}", column=s.target)
    return visits


class ChainState:
    """Mutable working copy of a dataset for one chain."""

    def __init__(self, d: Dataset):
        self.meta = {c.name: c for c in d.columns}
        self.names = d.names
        self.values = {c.name: np.array(c.values) for c in d.columns}
        self.observed = {c.name: c.observed for c in d.columns}
        self.trace: list[dict] = []

    def design(self, names: Sequence[str]) -> np.ndarray:
        return build_design(self.values, self.meta, names)[0]

    def refresh_from(self, source: str) -> None:
        for c in self.meta.values():
            if c.is_derived and c.source == source:
                self.values[c.name] = power_transform(
                    self.values[source], np.ones_like(self.observed[source]), c.power, c.name)

    def refresh_all(self) -> None:
        for name in self.names:
            if not self.meta[name].is_derived:
                self.refresh_from(name)

    def to_dataset(self) -> Dataset:
        cols = []
        for name in self.names:
            c = self.meta[name]
            v = self.values[name]
            cols.append(c.with_cells(v, np.ones(v.size, dtype=bool)))
        return Dataset(cols)


def initialize_chain(d: Dataset, plan: ImputationPlan, rng: np.random.Generator,
                     visits=None) -> ChainState:
    """Fill each missing cell with a random draw from that variable's observed values."""
    if visits is None:
        visits = resolve_visits(d, plan)
    state = ChainState(d)
    for spec, _ in visits:
        obs = state.observed[spec.target]
        vals = state.values[spec.target]
        vals[~obs] = rng.choice(vals[obs], size=int(np.count_nonzero(~obs)))
    state.refresh_all()
    return state


def pmm_batch(donor_preds, target_preds, donor_values, k: int, rng: np.random.Generator) -> np.ndarray:
    """Predictive mean matching for many targets at once.

    For each target, the ``k`` donors with the smallest absolute prediction
    distance are found (ties broken by lowest donor index) and one of them is
    chosen uniformly.
    """
    donor_preds = np.asarray(donor_preds, dtype=float)
    target_preds = np.atleast_1d(np.asarray(target_preds, dtype=float))
    donor_values = np.asarray(donor_values)
    n = donor_preds.size
    if n < k:
        raise DataError(f"pmm needs at least k={k} donors, have {n}")
    pick = rng.integers(0, k, size=target_preds.size)
    out = np.empty(target_preds.size, dtype=donor_values.dtype)
    chunk = max(1, 2_000_000 // max(n, 1))
    for s in range(0, target_preds.size, chunk):
        t = target_preds[s:s + chunk]
        dist = np.abs(donor_preds[None, :] - t[:, None])
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1:k]
        below = dist < kth
        tie = dist == kth
        room = k - below.sum(axis=1, keepdims=True)
        sel = below | (tie & (np.cumsum(tie, axis=1) <= room))
        idx = np.nonzero(sel)[1].reshape(t.size, k)
        order = np.argsort(np.take_along_axis(dist, idx, axis=1), axis=1, kind="stable")
        ranked = np.take_along_axis(idx, order, axis=1)
        out[s:s + chunk] = donor_values[ranked[np.arange(t.size), pick[s:s + chunk]]]
    return out


def pmm_match(donor_preds, target_pred: float, donor_values, k: int, rng: np.random.Generator):
    """Impute one value by predictive mean matching; see :func:`pmm_batch`."""
    return pmm_batch(donor_preds, [target_pred], donor_values, k, rng)[0]


def impute_variable_step(state: ChainState, spec: VariableImputationSpec,
                         rng: np.random.Generator, predictors: Sequence[str],
                         cycle: int = 0) -> ChainState:
    """Refit the conditional model for ``spec.target`` and redraw its missing cells."""
    target = spec.target
    obs = state.observed[target]
    mis = ~obs
    X = state.design(predictors)
    y = state.values[target]
    X_obs, X_mis = X[obs], X[mis]
    n_mis = X_mis.shape[0]
    augmented = False

    if spec.method in (BAYES_LINEAR, PMM):
        fit = glm.fit_ols(X_obs, y[obs])
        draw = glm.draw_linear_params(fit, rng)
        if spec.method == BAYES_LINEAR:
            noise = rng.standard_normal(n_mis)
            new = X_mis @ draw.beta_star + draw.sigma_star * noise
        else:
            new = pmm_batch(X_obs @ fit.beta, X_mis @ draw.beta_star, y[obs], spec.k, rng)
    elif spec.method == LOGISTIC:
        # offset column = delta * (originally missing); zero on every fitted row
        offset = np.where(mis, spec.offset_delta, 0.0)
        fit = glm.fit_logistic(X_obs, y[obs], offset=offset[obs])
        augmented = fit.augmented
        draw = glm.draw_normal_params(fit.beta, fit.cov, rng)
        u = rng.random(n_mis)
        prob = expit(X_mis @ draw.beta_star + offset[mis])
        new = (u < prob).astype(float)
    else:
        K = len(state.meta[target].levels)
        fit = glm.fit_multinomial(X_obs, y[obs], K)
        augmented = fit.augmented
        draw = glm.draw_normal_params(fit.coef, fit.cov, rng)
        u = rng.random(n_mis)
        cum = np.cumsum(glm.multinomial_probabilities(X_mis, draw.beta_star), axis=1)
        new = np.minimum((u[:, None] >= cum).sum(axis=1), K - 1).astype(float)

    y[mis] = new
    state.refresh_from(target)
    state.trace.append({"cycle": cycle, "target": target, "augmented": bool(augmented)})
    return state


def run_chain(d: Dataset, plan: ImputationPlan, chain_index: int,
              master_seed: int | None = None, trace: list | None = None,
              visits=None) -> Dataset:
    """Initialize, run ``burn_in`` full cycles, and return the completed dataset."""
    if master_seed is None:
        master_seed = plan.config.seed
    if visits is None:
        visits = resolve_visits(d, plan)
    rng = np.random.default_rng(chain_seed(master_seed, chain_index))
    state = initialize_chain(d, plan, rng, visits)
    if visits:
        for cycle in range(1, plan.config.burn_in + 1):
            for spec, preds in visits:
                impute_variable_step(state, spec, rng, preds, cycle)
    if trace is not None:
        trace.extend(state.trace)
    return state.to_dataset()


@dataclass(eq=False)
class ImputationSet:
    datasets: tuple[Dataset, ...]
    imputed: dict[str, np.ndarray]
    chain_seeds: tuple[int, ...]
    config: ImputationConfig
    augmented_fits: dict[str, int] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.datasets)

    def mask_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.imputed):
            h.update(name.encode())
            h.update(np.packbits(self.imputed[name]).tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> list[Path]:
        """Write ``imputation_XXX.csv`` files and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for m, ds in enumerate(self.datasets):
            p = directory / f"imputation_{m:03d}.csv"
            write_csv(ds, p)
            written.append(p)
        manifest = {
            "M": self.M,
            "config": asdict(self.config),
            "chain_seeds": [str(s) for s in self.chain_seeds],
            "imputed_cells": {k: int(v.sum()) for k, v in sorted(self.imputed.items())},
            "imputed_mask_sha256": self.mask_digest(),
            "augmented_fits": dict(sorted(self.augmented_fits.items())),
            "files": [p.name for p in written],
        }
        mp = directory / "manifest.json"
        mp.write_text(json.dumps(manifest, indent=2) + "\n")
        written.append(mp)
        return written


def impute_all(d: Dataset, plan: ImputationPlan, threads: int = 1) -> ImputationSet:
    """Run ``M`` independent chains; results are ordered by chain index."""
    visits = resolve_visits(d, plan)
    cfg = plan.config

    def one(m: int):
        trace: list = []
        try:
            ds = run_chain(d, plan, m, cfg.seed, trace, visits)
        except MissplanError as exc:
            exc.args = (f"chain {m}: {exc}",)
            raise
        return ds, trace

    if threads > 1 and cfg.M > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(cfg.M)))
    else:
        results = [one(m) for m in range(cfg.M)]

    augmented: dict[str, int] = {}
    for _, trace in results:
        for rec in trace:
            if rec["augmented"]:
                augmented[rec["target"]] = augmented.get(rec["target"], 0) + 1
    imputed = {s.target: ~d[s.target].observed for s, _ in visits}
    return ImputationSet(tuple(ds for ds, _ in results), imputed,
                         tuple(chain_seed(cfg.seed, m) for m in range(cfg.M)), cfg, augmented)
