"""Report bundle: report.json, data/*.csv and plotdata/*.csv.

``report.json`` is written with sorted keys and a fixed layout so reruns with
the same config and seed are byte-identical apart from ``timestamp``.
Non-finite floats are stored as ``null``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

REPORT_NAME = "report.json"
ERROR_NAME = "error.json"


@dataclass
class Table:
    header: list[str]
    rows: list = field(default_factory=list)

    @classmethod
    def from_columns(cls, columns: dict) -> "Table":
        names = list(columns)
        cols = [np.asarray(columns[n]).ravel() for n in names]
        n = {c.size for c in cols}
        if len(n) > 1:
            raise ValueError("columns have different lengths")
        rows = np.column_stack(cols).tolist() if cols and cols[0].size else []
        return cls(names, rows)


@dataclass
class PipelineResult:
    experiment: str
    report: dict
    data: dict = field(default_factory=dict)  # name -> Table
    plotdata: dict = field(default_factory=dict)


def sanitize(obj):
    """Convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"real": sanitize(obj.real.tolist()), "imag": sanitize(obj.imag.tolist())}
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (complex, np.complexfloating)):
        return {"real": sanitize(obj.real), "imag": sanitize(obj.imag)}
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_json"):
        return sanitize(obj.to_json())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(payload: dict) -> str:
    return json.dumps(sanitize(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def timestamp() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def write_csv(path: Path, table: Table):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def report_bundle(result: PipelineResult, config: dict, out_dir: str | Path) -> list[Path]:
    """Write the report and all tables; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "status": "ok",
        "experiment": result.experiment,
        "config": config,
        "results": result.report,
        "files": {"data": sorted(f"data/{k}.csv" for k in result.data),
                  "plotdata": sorted(f"plotdata/{k}.csv" for k in result.plotdata)},
        "timestamp": timestamp(),
    }
    written = []
    for sub, tables in (("data", result.data), ("plotdata", result.plotdata)):
        for name, table in sorted(tables.items()):
            p = out / sub / f"{name}.csv"
            write_csv(p, table)
            written.append(p)
    rp = out / REPORT_NAME
    rp.write_text(dumps(payload))
    written.append(rp)
    return written


def error_report(out_dir: str | Path, exc: BaseException, exit_code: int, config: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    details = {}
    for attr in ("t_star", "norm", "eps"):
        if hasattr(exc, attr):
            details[attr] = getattr(exc, attr)
    payload = {
        "status": "error",
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": exit_code,
        "details": details,
        "config": config,
        "timestamp": timestamp(),
    }
    p = out / ERROR_NAME
    p.write_text(dumps(payload))
    return p
