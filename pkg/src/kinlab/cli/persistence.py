"""Deterministic CSV/JSON output.

Floats are written with ``repr`` (shortest string that round-trips), JSON keys
are sorted, and non-finite floats become the strings "nan", "inf", "-inf".
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class PersistError(OSError):
    pass


@dataclass
class Table:
    """A numeric series: fixed column order, one row per record."""
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[dict], columns: Sequence[str] | None = None) -> "Table":
        records = list(records)
        if columns is None:
            columns = list(records[0]) if records else []
        return cls(list(columns), [[r[c] for c in columns] for r in records])

    @classmethod
    def from_columns(cls, **cols) -> "Table":
        names = list(cols)
        data = [np.asarray(v).tolist() for v in cols.values()]
        if len({len(c) for c in data}) > 1:
            raise ValueError("columns differ in length")
        return cls(names, [list(r) for r in zip(*data)])


def format_scalar(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(x, Fraction):
        return str(x)
    if x is None:
        return ""
    return str(x)


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays, tuples, fractions and complex numbers to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else format_scalar(x)
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": to_jsonable(obj.real), "im": to_jsonable(obj.imag)}
    if isinstance(obj, Fraction):
        return str(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def dumps_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        if len(row) != len(table.columns):
            raise ValueError("row length does not match the header")
        writer.writerow([format_scalar(x) for x in row])
    return buf.getvalue()


def read_csv(path: str | Path) -> Table:
    """Parse a file written by dumps_csv; cells stay strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        return Table(header, [row for row in reader])


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise PersistError(f"cannot write {path}: {exc.strerror or exc}") from exc


def persist(results: dict[str, Any], manifest: dict, out_dir: str | Path) -> list[str]:
    """Write each result as <name>.csv (Table) or <name>.json (anything else),
    then manifest.json listing every file.  Existing files are overwritten."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    written = []
    for name in sorted(results):
        value = results[name]
        if isinstance(value, Table):
            fname = f"{name}.csv"
            _write(out / fname, dumps_csv(value))
        else:
            fname = f"{name}.json"
            _write(out / fname, dumps_json(value))
        written.append(fname)
    manifest = dict(manifest, files=written)
    _write(out / "manifest.json", dumps_json(manifest))
    return written + ["manifest.json"]
