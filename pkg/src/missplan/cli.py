"""Command-line entry point: ``missplan <command> --plan plan.json``."""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import BINARY, Dataset, complete_record_mask, load_csv
from .diagnostics import (group_compare, missing_summary, missingness_predictors,
                          pattern_table)
from .errors import MissplanError, NumericalError, PlanError
from .formatting import fmt_num, write_rows
from .mice import ImputationSet, chain_seed, impute_all
from .plan import AnalysisPlan, load_plan
from .planner import advise
from .pooling import analyze_imputations, complete_records_analysis
from .report import RESULT_COLUMNS, ReportInputs, render_report, results_rows
from .sensitivity import fraction_imputed_positive, run_delta_grid
from .simgen import run_experiment

COMMANDS = ("explore", "impute", "analyze", "sensitivity", "advise", "simulate", "report")
THREADS_ENV = "TARMOS_THREADS"


@contextlib.contextmanager
def stage(name: str):
    """Label errors raised inside with the pipeline stage."""
    try:
        yield
    except MissplanError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
        raise
    except np.linalg.LinAlgError as exc:
        err = NumericalError(str(exc))
        err.stage = name
        raise err from exc


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise PlanError(f"{THREADS_ENV} must be an integer, got {env!r}", "threads") from None
        else:
            value = 1
    if value < 1:
        raise PlanError("thread count must be >= 1", "threads")
    return value


class Pipeline:
    """Lazily computed stages for one plan; each stage runs at most once."""

    def __init__(self, plan: AnalysisPlan, threads: int = 1):
        self.plan = plan
        self.threads = threads
        self._cache: dict[str, object] = {}

    def _once(self, key, fn):
        if key not in self._cache:
            with stage(key):
                self._cache[key] = fn()
        return self._cache[key]

    def data(self) -> Dataset:
        p = self.plan

        def load():
            p.require("schema")
            return load_csv(p.data_path, p.schema)
        return self._once("load", load)

    @property
    def analysis_vars(self) -> tuple[str, ...]:
        return self.plan.require("analysis").variables

    def describe_vars(self) -> list[str]:
        a = list(self.analysis_vars)
        return a + [v for v in self.plan.auxiliaries if v not in a]

    def complete_mask(self) -> np.ndarray:
        return complete_record_mask(self.data(), self.analysis_vars)

    def summary(self):
        return self._once("explore", lambda: missing_summary(self.data(), self.analysis_vars))

    def patterns(self):
        vars_ = self.plan.diagnostics.pattern_variables or self.describe_vars()
        return self._once("explore.patterns", lambda: pattern_table(self.data(), vars_))

    def comparison(self):
        vars_ = self.plan.diagnostics.compare_variables or self.describe_vars()
        return self._once("explore.compare",
                          lambda: group_compare(self.data(), self.complete_mask(), vars_))

    def predictors(self):
        dg = self.plan.diagnostics

        def fit():
            mask = self.complete_mask()
            if not dg.candidates or mask.all() or not mask.any():
                return None
            return missingness_predictors(self.data(), mask, dg.candidates, dg.per_units, dg.adjusted)
        return self._once("explore.predictors", fit)

    def advice(self):
        return self._once("advise", lambda: advise(self.summary(), self.predictors(),
                                                   self.plan.planner, self.plan.threshold))

    def imputations(self) -> ImputationSet:
        return self._once("impute", lambda: impute_all(self.data(), self.plan.require("imputation"),
                                                       threads=self.threads))

    def mi_result(self):
        return self._once("analyze.mi", lambda: analyze_imputations(self.imputations(),
                                                                    self.plan.require("analysis")))

    def cca_result(self):
        return self._once("analyze.cca", lambda: complete_records_analysis(
            self.data(), self.plan.require("analysis")))

    def mi_pct_positive(self) -> float | None:
        s = self.imputations()
        target = self.plan.sensitivity.target if self.plan.sensitivity else None
        if target is None:
            exp = self.plan.require("analysis").exposure
            if self.data()[exp].kind == BINARY:
                target = exp
        if target is None or target not in s.imputed or not s.imputed[target].any():
            return None
        return fraction_imputed_positive(s, target)

    def sensitivity(self):
        p = self.plan
        return self._once("sensitivity", lambda: run_delta_grid(
            self.data(), p.require("imputation"), p.require("analysis"), p.require("sensitivity"),
            threads=self.threads))

    def simulation(self):
        sim = self.plan.require("simulation")
        return self._once("simulate", lambda: run_experiment(sim.scenario, sim.methods, sim.reps,
                                                             sim.mi, threads=self.threads))


def _write_tables(tables, directory: Path) -> list[Path]:
    return [write_rows(rows, directory / name, cols) for name, (rows, cols) in tables.items()]


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return path


def _deviation_text(d: dict) -> str:
    return f"{d['field']} overridden: planned {d['planned']}, used {d['used']}"


def plan_lines(plan: AnalysisPlan) -> list[tuple[str, str]]:
    lines = []
    if plan.analysis is not None:
        a = plan.analysis
        model = f"linear regression of {a.outcome} on {a.exposure}"
        if a.covariates:
            model += " adjusted for " + ", ".join(a.covariates)
        lines.append(("Analysis model", model))
        lines.append(("Auxiliary variables", ", ".join(plan.auxiliaries) or "none"))
    if plan.imputation is not None:
        specs = "; ".join(f"{s.target}: {s.method}" + (f" (k={s.k})" if s.method == "pmm" else "")
                          for s in plan.imputation.specs)
        lines.append(("Imputation models", specs or "none"))
    if plan.schema is not None and plan.schema.derived:
        lines.append(("Derived terms", ", ".join(f"{t.name} = {t.source}^{t.label}"
                                                 for t in plan.schema.derived)))
    if plan.sensitivity is not None:
        s = plan.sensitivity
        lines.append(("Sensitivity analysis",
                      f"log-odds shift on imputed {s.target}, criterion {s.criterion}, "
                      f"alpha {s.alpha:g}"))
    lines.append(("Planner threshold", f"{fmt_num(plan.threshold, 1)}% incomplete records"))
    return lines


def reproducibility_lines(plan: AnalysisPlan) -> list[tuple[str, str]]:
    out = [("Tool version", __version__), ("Plan SHA-256", plan.digest)]
    im = plan.imputation
    if im is not None:
        c = im.config
        out += [("Master seed", str(c.seed)), ("Imputations (M)", str(c.M)),
                ("Burn-in cycles", str(c.burn_in)), ("Visit order", c.visit_order),
                ("Chain seeds", "SeedSequence([master seed, chain index]); listed in the manifest")]
    s = plan.sensitivity
    if s is not None:
        out += [("Delta grid", ", ".join(f"{d:g}" for d in s.deltas)),
                ("Imputations per delta", str(s.M_sens))]
    return out


def build_report_inputs(pipe: Pipeline) -> ReportInputs:
    plan = pipe.plan
    mi = pct = None
    aug: dict = {}
    if plan.imputation is not None:
        mi = pipe.mi_result()
        pct = pipe.mi_pct_positive()
        aug = dict(pipe.imputations().augmented_fits)
    sens = pipe.sensitivity() if plan.sensitivity is not None else None
    return ReportInputs(
        title=plan.title, plan_lines=plan_lines(plan), summary=pipe.summary(),
        patterns=pipe.patterns(), comparison=pipe.comparison(), predictors=pipe.predictors(),
        advice=pipe.advice(), mi=mi, mi_pct_positive=pct, cca=pipe.cca_result(),
        sensitivity=sens, sensitivity_target=plan.sensitivity.target if sens else None,
        reproducibility=reproducibility_lines(plan), augmented_fits=aug,
        deviations=[_deviation_text(d) for d in plan.deviations if d["field"] != "output"])


def run_command(command: str, pipe: Pipeline) -> list[Path]:
    """Execute one command; returns written files."""
    out = pipe.plan.output
    written: list[Path] = []
    if command == "explore":
        d = out / "explore"
        tables = {"missing_summary.csv": (pipe.summary().to_rows(),
                                          ["variable", "n_observed", "n_missing", "pct_missing"])}
        tables["patterns.csv"] = (pipe.patterns().to_rows(), None)
        tables["comparison.csv"] = (pipe.comparison().to_rows(), None)
        md = ["## Missingness by variable", "", pipe.summary().to_markdown(), "",
              "## Missingness patterns", "", pipe.patterns().to_markdown(), "",
              "## Characteristics by completeness", "", pipe.comparison().to_markdown(), ""]
        pr = pipe.predictors()
        if pr is not None:
            tables["predictors.csv"] = (pr.to_rows(), None)
            md += ["## Predictors of being a complete record", "", pr.to_markdown(), ""]
        written += _write_tables({k: (r, c or _columns(r)) for k, (r, c) in tables.items()}, d)
        written.append(_write_text(d / "diagnostics.md", "\n".join(md)))
    elif command == "impute":
        written += pipe.imputations().save(out / "imputations")
    elif command == "analyze":
        inputs = ReportInputs(title="", plan_lines=[], summary=None, mi=pipe.mi_result(),
                              mi_pct_positive=pipe.mi_pct_positive(), cca=pipe.cca_result())
        written.append(write_rows(results_rows(inputs), out / "analysis" / "results.csv",
                                  RESULT_COLUMNS))
    elif command == "sensitivity":
        s = pipe.sensitivity()
        inputs = ReportInputs(title="", plan_lines=[], summary=None, sensitivity=s)
        written.append(write_rows(results_rows(inputs), out / "sensitivity" / "sensitivity.csv",
                                  RESULT_COLUMNS))
        tip = "" if s.tipping_delta is None else repr(float(s.tipping_delta))
        written.append(write_rows([{"criterion": s.criterion, "alpha": s.alpha, "tipping_delta": tip}],
                                  out / "sensitivity" / "tipping_point.csv"))
    elif command == "advise":
        a = pipe.advice()
        written.append(_write_text(out / "advise" / "advice.md", a.to_markdown()))
        payload = {"q1": [a.q1_cca_valid.answer, list(a.q1_cca_valid.reasons)],
                   "q2": [a.q2_mi_beneficial.answer, list(a.q2_mi_beneficial.reasons)],
                   "q3": [a.q3_sensitivity_needed.answer, list(a.q3_sensitivity_needed.reasons)],
                   "recommendation": list(a.recommendation),
                   "pct_incomplete": a.pct_incomplete, "threshold": a.threshold}
        written.append(_write_text(out / "advise" / "advice.json", json.dumps(payload, indent=2)))
    elif command == "simulate":
        rep = pipe.simulation()
        rows = rep.to_rows()
        written.append(write_rows(rows, out / "simulation" / "simulation.csv", _columns(rows)))
        written.append(_write_text(out / "simulation" / "simulation.md", rep.to_markdown()))
    elif command == "report":
        with stage("report"):
            rendered = render_report(build_report_inputs(pipe))
        written += _write_tables(rendered.tables, out / "report")
        written.append(_write_text(out / "report" / "report.md", rendered.markdown))
    else:
        raise PlanError(f"unknown command {command!r}", "command")
    return written


def _columns(rows) -> list[str]:
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    return cols


def update_manifest(plan: AnalysisPlan, command: str, started: str, written: list[Path],
                    status: str, threads: int, error: dict | None = None) -> Path:
    path = plan.output / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except (json.JSONDecodeError, OSError):
            manifest = {}
    seeds = {}
    if plan.imputation is not None:
        cfg = plan.imputation.config
        n = max(cfg.M, plan.sensitivity.M_sens if plan.sensitivity else 0)
        seeds = {"chain_seeds": [str(chain_seed(cfg.seed, m)) for m in range(n)]}
    runs = manifest.get("runs", [])
    run = {"command": command, "status": status, "started": started, "finished": _now(),
           "threads": threads, "outputs": [str(p.relative_to(plan.output)) for p in written]}
    if error:
        run["error"] = error
    runs.append(run)
    manifest.update({
        "tool": "missplan", "tool_version": __version__,
        "plan": str(plan.path), "plan_sha256": plan.digest,
        "master_seed": None if plan.seed is None else str(plan.seed),
        **seeds,
        "deviations": plan.deviations,
        "runs": runs,
    })
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def error_record(exc: BaseException) -> dict:
    rec = {"error": type(exc).__name__, "exit_code": getattr(exc, "exit_code", 1),
           "message": str(exc)}
    for key in ("stage", "path", "row", "column"):
        val = getattr(exc, key, None)
        if val not in (None, ""):
            rec[key] = val
    return rec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="missplan",
                                     description="Pre-specified missing-data analysis pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--plan", required=True, help="JSON analysis plan")
        p.add_argument("--seed", type=int, help="override the master seed (recorded as a deviation)")
        p.add_argument("--m", type=int, help="override the number of imputations")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    plan = None
    started = _now()
    threads = 1
    written: list[Path] = []
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise PlanError("seed must be an unsigned 64-bit integer", "seed")
        threads = resolve_threads(args.threads)
        with stage("plan"):
            plan = load_plan(args.plan, seed=args.seed, M=args.m, out=args.out)
        written = run_command(args.command, Pipeline(plan, threads))
    except (MissplanError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, np.linalg.LinAlgError):
            exc = NumericalError(str(exc))
        rec = error_record(exc)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        if plan is not None:
            with contextlib.suppress(OSError):
                update_manifest(plan, args.command, started, written, "error", threads, rec)
        return rec["exit_code"]
    update_manifest(plan, args.command, started, written, "ok", threads)
    return 0


if __name__ == "__main__":
    sys.exit(main())
