"""Fixed-precision number formatting and small table writers."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def fmt_num(x: float, dp: int = 1) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    s = f"{x:.{dp}f}"
    # avoid "-0.0"
    if s.startswith("-") and float(s) == 0:
        s = s[1:]
    return s


def fmt_ci(est: float, lo: float, hi: float, dp: int = 1) -> str:
    return f"{fmt_num(est, dp)} ({fmt_num(lo, dp)}, {fmt_num(hi, dp)})"


def fmt_p(p: float) -> str:
    if p < 0.001:
        return "<0.001"
    return f"{p:.3f}"


def fmt_int(n: int) -> str:
    return f"{n:,}"


def fmt_pct(x: float, dp: int = 0) -> str:
    return f"{fmt_num(x, dp)}%"


def cell(x) -> str:
    """Full-precision CSV rendering."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return repr(x)
    if x is None:
        return ""
    return str(x)


def write_rows(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([cell(r.get(c)) for c in columns])
    return path


def markdown_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(c) for c in r) + " |")
    return "\n".join(lines)
