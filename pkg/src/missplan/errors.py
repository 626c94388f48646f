"""Exception hierarchy.

Each family maps onto a CLI exit code so the command line can report a
single machine-readable line and exit with a stable status.
"""


class MissplanError(Exception):
    exit_code = 1


class PlanError(MissplanError):
    """Invalid analysis plan; ``path`` names the offending field."""

    exit_code = 2

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DataError(MissplanError):
    """Problem with the data itself (parsing, unknown variables, degenerate input)."""

    exit_code = 3

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class NumericalError(MissplanError):
    exit_code = 4


class RankDeficientError(NumericalError):
    def __init__(self, column: int, label: str | None = None):
        self.column = column
        self.label = label
        name = f"{label!r} (index {column})" if label else f"index {column}"
        super().__init__(f"design matrix is rank deficient at column {name}")


class ConvergenceError(NumericalError):
    pass


class IncompatibleModelError(PlanError):
    pass
