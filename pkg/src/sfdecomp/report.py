"""Run reports: JSON (canonical) and a flattened CSV projection.

A report is a plain dict::

    {"tool", "version", "command", "inputs": {path: sha256}, "seed",
     "exclusions": {"counts": {...}, "rows": [[row, reason], ...]},
     "tables": {name: {"columns": [...], "rows": [[...], ...]}},
     "warnings": [...]}

Floats are written with ``repr`` (shortest round-trip form, at most 17
significant digits) and NaN becomes null, so numeric tables survive both
formats unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__

TOOL = "sfdecomp"


def digest(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def clean(value):
    """Convert numpy scalars / NaN into JSON-safe Python values."""
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(value, Mapping):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [clean(v) for v in value]
    return value


def table(columns: Sequence[str], rows: Iterable[Sequence]) -> dict:
    return {"columns": list(columns), "rows": [clean(list(r)) for r in rows]}


def records_table(records: Sequence[Mapping]) -> dict:
    columns = list(dict.fromkeys(k for r in records for k in r))
    return table(columns, ([r.get(c) for c in columns] for r in records))


def new_report(command: Sequence[str], seed: int | None = None) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "command": list(command),
        "inputs": {},
        "seed": seed,
        "exclusions": {"counts": {}, "rows": []},
        "tables": {},
        "warnings": [],
    }


def to_json(report: Mapping) -> str:
    return json.dumps(clean(report), indent=2, allow_nan=False) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(report: Mapping) -> str:
    """Long format: ``section,table,row,column,value``.

    Metadata lands in section ``meta``; every table cell in section ``table``.
    """
    rep = clean(report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "table", "row", "column", "value"])
    for key in ("tool", "version", "seed"):
        w.writerow(["meta", "", "", key, _cell(rep.get(key))])
    w.writerow(["meta", "", "", "command", " ".join(rep.get("command", []))])
    for path, dig in rep.get("inputs", {}).items():
        w.writerow(["input", "", "", path, dig])
    for reason, count in rep.get("exclusions", {}).get("counts", {}).items():
        w.writerow(["exclusion_count", "", "", reason, count])
    for i, msg in enumerate(rep.get("warnings", [])):
        w.writerow(["warning", "", i, "", msg])
    for name, tab in rep.get("tables", {}).items():
        for i, row in enumerate(tab["rows"]):
            for col, val in zip(tab["columns"], row):
                w.writerow(["table", name, i, col, _cell(val)])
    return buf.getvalue()


def _parse(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def tables_from_csv(text: str) -> dict:
    """Rebuild the ``tables`` section from :func:`to_csv` output."""
    out: dict[str, dict] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        if rec["section"] != "table":
            continue
        tab = out.setdefault(rec["table"], {"columns": [], "rows": []})
        i = int(rec["row"])
        while len(tab["rows"]) <= i:
            tab["rows"].append({})
        if rec["column"] not in tab["columns"]:
            tab["columns"].append(rec["column"])
        tab["rows"][i][rec["column"]] = _parse(rec["value"])
    for tab in out.values():
        tab["rows"] = [[r.get(c) for c in tab["columns"]] for r in tab["rows"]]
    return out


def render(report: Mapping, fmt: str) -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    raise ValueError(f"unknown format {fmt!r}")
