"""Typed tabular data with explicit per-cell missingness.

A :class:`Dataset` is an ordered collection of :class:`Column` objects. Every
column stores its cells as a float vector plus a boolean ``observed`` mask;
the mask is authoritative and missing cells hold NaN so that accidental use
propagates visibly. Categorical cells hold the integer code of their level
(an index into ``levels``), binary cells hold 0.0 or 1.0.

Derived columns are power transforms of a continuous source column. They are
materialized and must be refreshed whenever the source changes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, PlanError

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
DERIVED = "derived"

BASE_KINDS = (CONTINUOUS, BINARY, CATEGORICAL)
DEFAULT_MISSING_TOKENS = ("", "NA")


def parse_power(value) -> float:
    """Accept ``2``, ``0.5`` or a fraction string such as ``"1/3"``."""
    if isinstance(value, bool):
        raise ValueError(f"invalid power {value!r}")
    if isinstance(value, (int, float)):
        p = float(value)
    else:
        try:
            p = float(Fraction(str(value).strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"invalid power {value!r}") from exc
    if not math.isfinite(p):
        raise ValueError(f"invalid power {value!r}")
    return p


def _is_integral(p: float) -> bool:
    return float(p).is_integer()


def power_transform(source: np.ndarray, observed: np.ndarray, power: float,
                    name: str = "") -> np.ndarray:
    """Return ``source**power`` on observed cells and NaN elsewhere."""
    out = np.full(source.shape, np.nan)
    vals = source[observed]
    if not _is_integral(power) and np.any(vals < 0):
        bad = int(np.flatnonzero(observed)[np.argmax(vals < 0)])
        raise DataError(f"fractional power {power:g} of negative value {source[bad]!r}",
                        row=bad + 1, column=name or None)
    out[observed] = np.power(vals, power)
    return out


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class DerivedTerm:
    name: str
    source: str
    power: float
    label: str = ""

    @classmethod
    def make(cls, name: str, source: str, power) -> "DerivedTerm":
        return cls(name=name, source=source, power=parse_power(power), label=str(power))


@dataclass(frozen=True)
class Schema:
    """Per-column kinds, missing tokens and derived terms."""

    columns: tuple[ColumnSpec, ...]
    derived: tuple[DerivedTerm, ...] = ()
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS

    def __post_init__(self):
        seen: dict[str, ColumnSpec] = {}
        for c in self.columns:
            if c.kind not in BASE_KINDS:
                raise PlanError(f"unknown kind {c.kind!r}", f"columns.{c.name}")
            if c.name in seen:
                raise PlanError("duplicate column name", f"columns.{c.name}")
            if c.kind == CATEGORICAL:
                if len(c.levels) < 2 or len(set(c.levels)) != len(c.levels):
                    raise PlanError("categorical needs >= 2 distinct levels",
                                    f"columns.{c.name}.levels")
            seen[c.name] = c
        for t in self.derived:
            path = f"derived.{t.name}"
            if t.name in seen:
                raise PlanError("derived name clashes with a column", path)
            src = seen.get(t.source)
            if src is None or src.kind != CONTINUOUS:
                raise PlanError(f"source {t.source!r} is not a declared continuous column", path)
            seen[t.name] = ColumnSpec(t.name, DERIVED)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Schema":
        cols = []
        for c in raw["columns"]:
            cols.append(ColumnSpec(c["name"], c["kind"], tuple(str(v) for v in c.get("levels", ()))))
        derived = []
        for i, t in enumerate(raw.get("derived", [])):
            try:
                derived.append(DerivedTerm.make(t["name"], t["source"], t["power"]))
            except ValueError as exc:
                raise PlanError(str(exc), f"derived[{i}].power") from exc
        tokens = tuple(raw.get("missing_tokens", DEFAULT_MISSING_TOKENS))
        return cls(tuple(cols), tuple(derived), tokens)

    def to_dict(self) -> dict:
        out = {"columns": [], "derived": [], "missing_tokens": list(self.missing_tokens)}
        for c in self.columns:
            entry = {"name": c.name, "kind": c.kind}
            if c.kind == CATEGORICAL:
                entry["levels"] = list(c.levels)
            out["columns"].append(entry)
        for t in self.derived:
            out["derived"].append({"name": t.name, "source": t.source, "power": t.label or t.power})
        return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Column:
    name: str
    kind: str
    values: np.ndarray
    observed: np.ndarray
    levels: tuple[str, ...] = ()
    source: str | None = None
    power: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        observed = np.asarray(self.observed, dtype=bool)
        if values.shape != observed.shape or values.ndim != 1:
            raise DataError("values and mask must be 1-d and of equal length", column=self.name)
        values = np.where(observed, values, np.nan)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "observed", _readonly(observed))

    @property
    def n_missing(self) -> int:
        return int(self.observed.size - np.count_nonzero(self.observed))

    @property
    def is_derived(self) -> bool:
        return self.kind == DERIVED

    def with_cells(self, values: np.ndarray, observed: np.ndarray) -> "Column":
        return Column(self.name, self.kind, values, observed, self.levels, self.source, self.power)

    def format_cell(self, i: int, missing_token: str = "") -> str:
        if not self.observed[i]:
            return missing_token
        v = self.values[i]
        if self.kind == CATEGORICAL:
            return self.levels[int(v)]
        if self.kind == BINARY:
            return str(int(v))
        return repr(float(v))


class Dataset:
    """Immutable, ordered set of equal-length columns."""

    def __init__(self, columns: Iterable[Column]):
        cols = tuple(columns)
        lengths = {c.values.size for c in cols}
        if len(lengths) > 1:
            raise DataError(f"columns have differing lengths {sorted(lengths)}")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names")
        self._columns = cols
        self._index = {c.name: i for i, c in enumerate(cols)}
        self.n_rows = lengths.pop() if lengths else 0

    @property
    def columns(self) -> tuple[Column, ...]:
        return self._columns

    @property
    def names(self) -> list[str]:
        return [c.name for c in self._columns]

    def __getitem__(self, name: str) -> Column:
        try:
            return self._columns[self._index[name]]
        except KeyError:
            raise DataError(f"unknown variable {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __repr__(self):
        return f"Dataset(n_rows={self.n_rows}, columns={self.names})"

    def check_names(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self._index:
                raise DataError(f"unknown variable {n!r}")

    def derived_columns(self) -> list[Column]:
        return [c for c in self._columns if c.is_derived]

    def replace(self, updates: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> "Dataset":
        """New dataset with ``name -> (values, observed)`` swapped in."""
        self.check_names(updates)
        cols = []
        for c in self._columns:
            if c.name in updates:
                vals, obs = updates[c.name]
                c = c.with_cells(vals, obs)
            cols.append(c)
        return Dataset(cols)

    def take(self, rows: np.ndarray) -> "Dataset":
        """Row subset (boolean mask or index array)."""
        return Dataset(c.with_cells(c.values[rows], c.observed[rows]) for c in self._columns)

    def cells_equal(self, other: "Dataset") -> bool:
        if self.names != other.names or self.n_rows != other.n_rows:
            return False
        for a, b in zip(self._columns, other._columns):
            if not np.array_equal(a.observed, b.observed):
                return False
            if not np.array_equal(a.values[a.observed], b.values[b.observed]):
                return False
        return True

    @classmethod
    def from_arrays(cls, data: Mapping[str, Sequence], schema: Schema) -> "Dataset":
        """Build from Python values; ``None`` or NaN marks a missing cell.

        Categorical cells may be given as level labels or integer codes.
        """
        cols = []
        n = None
        for spec in schema.columns:
            raw = list(data[spec.name])
            n = len(raw) if n is None else n
            vals = np.full(len(raw), np.nan)
            obs = np.zeros(len(raw), dtype=bool)
            for i, v in enumerate(raw):
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    continue
                if spec.kind == CATEGORICAL:
                    if isinstance(v, str):
                        if v not in spec.levels:
                            raise DataError(f"unknown level {v!r}", row=i + 1, column=spec.name)
                        v = spec.levels.index(v)
                    elif not 0 <= int(v) < len(spec.levels):
                        raise DataError(f"level code {v!r} out of range", row=i + 1, column=spec.name)
                elif spec.kind == BINARY and v not in (0, 1):
                    raise DataError(f"binary value {v!r} not in {{0,1}}", row=i + 1, column=spec.name)
                vals[i] = float(v)
                obs[i] = True
            cols.append(Column(spec.name, spec.kind, vals, obs, spec.levels))
        return refresh_derived(_attach_derived(cls(cols), schema))


def _attach_derived(d: Dataset, schema: Schema) -> Dataset:
    cols = list(d.columns)
    for t in schema.derived:
        cols.append(Column(t.name, DERIVED, np.full(d.n_rows, np.nan),
                           np.zeros(d.n_rows, dtype=bool), source=t.source, power=t.power))
    return Dataset(cols)


def refresh_derived(d: Dataset) -> Dataset:
    """Recompute every derived column from its current source cells."""
    updates = {}
    for c in d.derived_columns():
        src = d[c.source]
        updates[c.name] = (power_transform(src.values, src.observed, c.power, c.name),
                           src.observed)
    return d.replace(updates) if updates else d


def complete_record_mask(d: Dataset, names: Sequence[str]) -> np.ndarray:
    """True for rows where every listed variable is observed."""
    d.check_names(names)
    mask = np.ones(d.n_rows, dtype=bool)
    for n in names:
        mask &= d[n].observed
    return mask


def _parse_cell(token: str, spec: ColumnSpec, row: int) -> float:
    if spec.kind == CATEGORICAL:
        try:
            return float(spec.levels.index(token))
        except ValueError:
            raise DataError(f"unknown categorical level {token!r}", row=row, column=spec.name) from None
    try:
        v = float(token)
    except ValueError:
        raise DataError(f"cannot parse {token!r} as a number", row=row, column=spec.name) from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {token!r}", row=row, column=spec.name)
    if spec.kind == BINARY and v not in (0.0, 1.0):
        raise DataError(f"binary value {token!r} not in {{0,1}}", row=row, column=spec.name)
    return v


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read a CSV file with a header row under ``schema``.

    Rows are numbered from 1 (first data row) in error messages.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    tokens = set(schema.missing_tokens)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        expected = schema.names
        missing = [n for n in expected if n not in header]
        if missing:
            raise DataError(f"header is missing column(s) {missing}")
        extra = [h for h in header if h not in expected]
        if extra:
            raise DataError(f"header has undeclared column(s) {extra}")
        if len(set(header)) != len(header):
            raise DataError("duplicate names in header")
        pos = {h: i for i, h in enumerate(header)}
        cells: dict[str, list[float]] = {n: [] for n in expected}
        masks: dict[str, list[bool]] = {n: [] for n in expected}
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(line)}", row=r)
            for spec in schema.columns:
                tok = line[pos[spec.name]].strip()
                if tok in tokens:
                    cells[spec.name].append(math.nan)
                    masks[spec.name].append(False)
                else:
                    cells[spec.name].append(_parse_cell(tok, spec, r))
                    masks[spec.name].append(True)
    cols = [Column(s.name, s.kind, np.array(cells[s.name], dtype=float),
                   np.array(masks[s.name], dtype=bool), s.levels) for s in schema.columns]
    return refresh_derived(_attach_derived(Dataset(cols), schema))


def write_csv(d: Dataset, path: str | Path, missing_token: str = "",
              include_derived: bool = False) -> None:
    """Write base columns (derived columns optional) so that ``load_csv`` round-trips."""
    cols = [c for c in d.columns if include_derived or not c.is_derived]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in cols])
        for i in range(d.n_rows):
            w.writerow([c.format_cell(i, missing_token) for c in cols])
