# app/services/report_service.py
# JSON / CSV output documents: 12 significant digits, stable layout, LF line endings
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

SIGNIFICANT_DIGITS = 12


def round_sig(x: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits - 1}e}")


def normalize(obj: Any) -> Any:
    """Round every float (numpy scalars included) and turn tuples into lists."""
    if isinstance(obj, dict):
        return {str(k): normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [normalize(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            # JSON has no infinities
            return None
        return round_sig(v)
    return obj


def dumps(doc: Any) -> str:
    return json.dumps(normalize(doc), indent=2, ensure_ascii=False) + "\n"


def write_json(doc: Any, path: str | Path | None) -> str:
    """Serialize doc; writes to path when given and returns the text either way."""
    text = dumps(doc)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text


def _cell(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        return repr(round_sig(float(v)))
    return v


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Returns the number of data rows written."""
    materialized = list(rows)
    Path(path).write_text(render_csv(header, materialized), encoding="utf-8", newline="\n")
    return len(materialized)


MARGIN_HEADER = ("n_users", "level", "g", "condition", "margin", "ci_low", "ci_high")
NSTAR_HEADER = ("n_users", "status", "min_margin", "min_ci_low", "entropy_min_margin", "method", "samples")
MOMENT_HEADER = ("n_users", "k", "estimate", "stderr")


def margin_rows(rows: Iterable[Any]) -> list[tuple]:
    return [(r.n_users, r.level, r.g, r.condition, r.margin, r.ci_low, r.ci_high) for r in rows]


def policy_table(tau: int, mix_prob: float, avg_power: float, regime: str) -> str:
    """Short human-readable summary for stderr."""
    return (
        f"tau        {tau}\n"
        f"mix_prob   {round_sig(mix_prob)!r}\n"
        f"avg power  {round_sig(avg_power)!r}\n"
        f"regime     {regime}\n"
    )
