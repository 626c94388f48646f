"""JSON analysis-plan loading and validation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema

from .dataset import BINARY, Schema
from .errors import PlanError
from .mice import ImputationConfig, ImputationPlan, VariableImputationSpec
from .planner import PlannerFlags
from .pooling import AnalysisModelSpec
from .sensitivity import DEFAULT_DELTAS, SensitivitySpec
from .simgen import SimMIConfig, SimScenario

_NAMES = {"type": "array", "items": {"type": "string"}}
_DELTA = {"anyOf": [{"type": "number"}, {"enum": ["inf", "+inf", "Infinity"]}]}

PLAN_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "title": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "columns"],
            "properties": {
                "path": {"type": "string"},
                "missing_tokens": _NAMES,
                "columns": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["name", "kind"],
                    "properties": {
                        "name": {"type": "string", "minLength": 1},
                        "kind": {"enum": ["continuous", "binary", "categorical"]},
                        "levels": {"type": "array", "items": {"type": ["string", "number"]}},
                        "label": {"type": "string"},
                    }}},
                "derived": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["name", "source", "power"],
                    "properties": {
                        "name": {"type": "string", "minLength": 1},
                        "source": {"type": "string"},
                        "power": {"type": ["number", "string"]},
                    }}},
            },
        },
        "analysis": {
            "type": "object", "additionalProperties": False,
            "required": ["outcome", "exposure"],
            "properties": {"outcome": {"type": "string"}, "exposure": {"type": "string"},
                           "covariates": _NAMES, "auxiliaries": _NAMES},
        },
        "imputation": {
            "type": "object", "additionalProperties": False,
            "required": ["variables"],
            "properties": {
                "M": {"type": "integer", "minimum": 2},
                "burn_in": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "visit_order": {"enum": ["as-configured", "ascending-missingness"]},
                "variables": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["target", "method"],
                    "properties": {
                        "target": {"type": "string"},
                        "method": {"enum": ["bayes_linear", "logistic", "multinomial", "pmm"]},
                        "k": {"type": "integer", "minimum": 1},
                        "omit": _NAMES,
                        "include": _NAMES,
                    }}},
            },
        },
        "sensitivity": {
            "type": "object", "additionalProperties": False,
            "required": ["target"],
            "properties": {
                "target": {"type": "string"},
                "deltas": {"type": "array", "minItems": 1, "items": _DELTA},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "M": {"type": "integer", "minimum": 2},
                "criterion": {"enum": ["ci-crosses-zero", "sign-flip"]},
            },
        },
        "diagnostics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "candidates": _NAMES,
                "pattern_variables": _NAMES,
                "compare_variables": _NAMES,
                "per_units": {"type": "object", "additionalProperties": {"type": "number",
                                                                          "exclusiveMinimum": 0}},
                "adjusted": {"type": "boolean"},
            },
        },
        "planner": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "outcome_missingness_assoc": {"type": ["boolean", "null"]},
                "auxiliaries_available": {"type": "boolean"},
                "mnar_suspected": {"type": "boolean"},
                "threshold": {"type": "number", "minimum": 0, "maximum": 100},
            },
        },
        "simulation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "scenario": {"type": "object"},
                "reps": {"type": "integer", "minimum": 1},
                "methods": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "M": {"type": "integer", "minimum": 2},
                "burn_in": {"type": "integer", "minimum": 1},
                "use_auxiliary": {"type": "boolean"},
            },
        },
        "output": {"type": "string"},
    },
}


@dataclass(frozen=True)
class DiagnosticsConfig:
    candidates: tuple[str, ...] = ()
    pattern_variables: tuple[str, ...] = ()
    compare_variables: tuple[str, ...] = ()
    per_units: dict = field(default_factory=dict)
    adjusted: bool = False


@dataclass(frozen=True)
class SimulationConfig:
    scenario: SimScenario
    reps: int = 200
    methods: tuple[str, ...] = ("full", "cca", "mi")
    mi: SimMIConfig = SimMIConfig()


@dataclass
class AnalysisPlan:
    path: Path
    digest: str
    raw: dict
    schema: Schema | None = None
    data_path: Path | None = None
    analysis: AnalysisModelSpec | None = None
    auxiliaries: tuple[str, ...] = ()
    imputation: ImputationPlan | None = None
    sensitivity: SensitivitySpec | None = None
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    planner: PlannerFlags = PlannerFlags()
    threshold: float = 5.0
    simulation: SimulationConfig | None = None
    output: Path = Path("out")
    deviations: list[dict] = field(default_factory=list)
    title: str = "Missing-data analysis"

    @property
    def seed(self) -> int | None:
        if self.imputation is not None:
            return self.imputation.config.seed
        if self.simulation is not None:
            return self.simulation.scenario.seed
        return None

    def require(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise PlanError("section is required for this command", section)
        return value


def _delta(v) -> float:
    return math.inf if isinstance(v, str) else float(v)


def _check_names(names, known, path):
    for n in names:
        if n not in known:
            raise PlanError(f"unknown variable {n!r}", path)


def plan_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_plan(path: str | Path, seed: int | None = None, M: int | None = None,
              out: str | Path | None = None) -> AnalysisPlan:
    """Parse and validate a plan file; overrides are recorded as deviations."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise PlanError(f"plan file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PlanError(f"invalid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, PLAN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "(root)"
        raise PlanError(exc.message, where) from None

    base = path.parent
    plan = AnalysisPlan(path=path, digest=plan_digest(path), raw=raw,
                        title=raw.get("title", "Missing-data analysis"))
    plan.output = base / raw.get("output", "out")
    known: set[str] = set()
    kinds: dict[str, str] = {}

    if "data" in raw:
        d = raw["data"]
        cols = [dict(c, levels=[str(v) for v in c.get("levels", [])]) for c in d["columns"]]
        plan.schema = Schema.from_dict({**d, "columns": cols})
        plan.data_path = base / d["path"]
        known = set(plan.schema.names) | {t.name for t in plan.schema.derived}
        kinds = {c.name: c.kind for c in plan.schema.columns}

    if "analysis" in raw:
        a = raw["analysis"]
        plan.analysis = AnalysisModelSpec(a["outcome"], a["exposure"], tuple(a.get("covariates", [])))
        plan.auxiliaries = tuple(a.get("auxiliaries", []))
        if plan.schema is not None:
            _check_names(plan.analysis.variables, known, "analysis")
            _check_names(plan.auxiliaries, known, "analysis.auxiliaries")
            if len(set(plan.analysis.variables)) != len(plan.analysis.variables):
                raise PlanError("outcome, exposure and covariates must be distinct", "analysis")
            if kinds.get(plan.analysis.outcome, "continuous") != "continuous":
                raise PlanError("outcome must be continuous", "analysis.outcome")
            if kinds.get(plan.analysis.exposure) == "categorical":
                raise PlanError("exposure must be binary or continuous", "analysis.exposure")

    if "imputation" in raw:
        im = raw["imputation"]
        specs = []
        for i, v in enumerate(im["variables"]):
            p = f"imputation.variables[{i}]"
            _check_names([v["target"]], known, p + ".target")
            _check_names(v.get("omit", []), known, p + ".omit")
            _check_names(v.get("include", []), known, p + ".include")
            specs.append(VariableImputationSpec(v["target"], v["method"], v.get("k", 5),
                                                tuple(v.get("omit", [])), tuple(v.get("include", []))))
        cfg = ImputationConfig(im.get("M", 5), im.get("burn_in", 10), im.get("seed", 0),
                               im.get("visit_order", "as-configured"))
        avars = plan.analysis.variables if plan.analysis else ()
        plan.imputation = ImputationPlan(tuple(specs), cfg, avars)

    if "sensitivity" in raw:
        s = raw["sensitivity"]
        deltas = tuple(_delta(x) for x in s.get("deltas", DEFAULT_DELTAS))
        plan.sensitivity = SensitivitySpec(s["target"], deltas, s.get("alpha", 0.05), s.get("M", 10),
                                           s.get("criterion", "ci-crosses-zero"))
        if plan.imputation is None:
            raise PlanError("sensitivity analysis needs an imputation section", "sensitivity")
        spec = plan.imputation.spec_for(s["target"])
        if spec.method != "logistic" or kinds.get(s["target"], BINARY) != BINARY:
            raise PlanError("sensitivity target must be binary with a logistic imputation model",
                            "sensitivity.target")

    dg = raw.get("diagnostics", {})
    plan.diagnostics = DiagnosticsConfig(tuple(dg.get("candidates", [])),
                                         tuple(dg.get("pattern_variables", [])),
                                         tuple(dg.get("compare_variables", [])),
                                         dict(dg.get("per_units", {})), dg.get("adjusted", False))
    for key in ("candidates", "pattern_variables", "compare_variables"):
        _check_names(getattr(plan.diagnostics, key), known, f"diagnostics.{key}")
    _check_names(plan.diagnostics.per_units, known, "diagnostics.per_units")

    pl = raw.get("planner", {})
    plan.planner = PlannerFlags(pl.get("outcome_missingness_assoc"),
                                pl.get("auxiliaries_available", bool(plan.auxiliaries)),
                                pl.get("mnar_suspected", plan.sensitivity is not None),
                                plan.analysis.outcome if plan.analysis else None)
    plan.threshold = float(pl.get("threshold", 5.0))

    if "simulation" in raw:
        sm = raw["simulation"]
        try:
            scen = SimScenario.from_dict(sm.get("scenario", {}))
        except TypeError as exc:
            raise PlanError(str(exc), "simulation.scenario") from None
        plan.simulation = SimulationConfig(
            scen, sm.get("reps", 200), tuple(sm.get("methods", ("full", "cca", "mi"))),
            SimMIConfig(sm.get("M", 10), sm.get("burn_in", 5), sm.get("use_auxiliary", True)))

    # overrides
    if seed is not None:
        plan.deviations.append({"field": "seed", "planned": plan.seed, "used": int(seed)})
        if plan.imputation is not None:
            plan.imputation = plan.imputation.with_config(seed=int(seed))
        if plan.simulation is not None:
            plan.simulation = replace(plan.simulation,
                                      scenario=replace(plan.simulation.scenario, seed=int(seed)))
    if M is not None:
        old = plan.imputation.config.M if plan.imputation else None
        plan.deviations.append({"field": "M", "planned": old, "used": int(M)})
        if plan.imputation is not None:
            plan.imputation = plan.imputation.with_config(M=int(M))
        if plan.simulation is not None:
            plan.simulation = replace(plan.simulation, mi=replace(plan.simulation.mi, M=int(M)))
    if out is not None:
        plan.deviations.append({"field": "output", "planned": str(plan.output), "used": str(out)})
        plan.output = Path(out)
    return plan
