"""Design-matrix construction shared by the imputation and analysis models."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .dataset import CATEGORICAL, Column, Dataset


def term_labels(meta: Mapping[str, Column], names: Sequence[str]) -> list[str]:
    labels = []
    for n in names:
        c = meta[n]
        if c.kind == CATEGORICAL:
            labels.extend(f"{n}={lev}" for lev in c.levels[1:])
        else:
            labels.append(n)
    return labels


def build_design(values: Mapping[str, np.ndarray], meta: Mapping[str, Column],
                 names: Sequence[str], intercept: bool = True) -> tuple[np.ndarray, list[str]]:
    """Columns for ``names``; categoricals become indicators against their first level."""
    n = len(next(iter(values.values()))) if values else 0
    parts = [np.ones(n)] if intercept else []
    labels = ["(intercept)"] if intercept else []
    for name in names:
        c = meta[name]
        v = values[name]
        if c.kind == CATEGORICAL:
            for code in range(1, len(c.levels)):
                parts.append((v == code).astype(float))
        else:
            parts.append(np.asarray(v, dtype=float))
    labels.extend(term_labels(meta, names))
    X = np.column_stack(parts) if parts else np.empty((n, 0))
    return X, labels


def dataset_design(d: Dataset, names: Sequence[str], intercept: bool = True):
    meta = {c.name: c for c in d.columns}
    values = {c.name: c.values for c in d.columns}
    return build_design(values, meta, names, intercept)
