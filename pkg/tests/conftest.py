import numpy as np
import pytest

from missplan.dataset import ColumnSpec, Dataset, DerivedTerm, Schema

ACCEPTANCE_LINES: dict[int, str] = {}


def make_schema(kinds: dict, derived=(), levels=None) -> Schema:
    levels = levels or {}
    cols = tuple(ColumnSpec(n, k, tuple(levels.get(n, ()))) for n, k in kinds.items())
    return Schema(cols, tuple(DerivedTerm.make(*t) for t in derived))


def make_dataset(data: dict, kinds: dict, derived=(), levels=None) -> Dataset:
    return Dataset.from_arrays(data, make_schema(kinds, derived, levels))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
