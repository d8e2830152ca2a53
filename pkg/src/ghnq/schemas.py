"""Strict schemas for every CSV the package writes.

``validate_csv(path, name)`` checks the exact header and every cell, raising
:class:`SchemaError` with the offending line on the first violation.
"""

from __future__ import annotations

import csv
import math
import re
from pathlib import Path
from typing import Callable

from .train import STUDY_COLUMNS, LayerwiseRecord


class SchemaError(ValueError):
    pass


def _float(v: str) -> bool:
    try:
        return math.isfinite(float(v))
    except ValueError:
        return False


def _opt_float(v: str) -> bool:
    return v == "" or _float(v)


def _percent(v: str) -> bool:
    return _float(v) and 0.0 <= float(v) <= 100.0


def _int(v: str) -> bool:
    return re.fullmatch(r"-?\d+", v) is not None


def _bool(v: str) -> bool:
    return v in ("true", "false")


def _name(v: str) -> bool:
    return re.fullmatch(r"[A-Za-z0-9_./\-]+", v) is not None


_BITS = re.compile(r"Float32|W\d+/A\d+")
_CELL = re.compile(r"\d+\.\d±\d+\.\d; \d+\.\d")


def _bits(v: str) -> bool:
    return _BITS.fullmatch(v) is not None


def _cell(v: str) -> bool:
    return _CELL.fullmatch(v) is not None


SPLIT_HEADERS = ("ID", "Deep", "Wide", "BN-Free")

_STUDY_TYPES = [_name, _percent, _percent, _float, _float, _float]


def _study_row(row: dict) -> str:
    if row["Diverged"] == "true":
        return "" if all(row[c] == "" for c in STUDY_COLUMNS[1:]) else "diverged rows must have empty metrics"
    return ""


SCHEMAS: dict = {
    "study": {
        "columns": STUDY_COLUMNS + ["Diverged"],
        "types": _STUDY_TYPES + [_bool],
        "row_check": _study_row,
        "lenient_when_diverged": True,
    },
    "study_table": {"columns": STUDY_COLUMNS, "types": _STUDY_TYPES},
    "layerwise": {
        "columns": list(LayerwiseRecord.__dataclass_fields__),
        "types": [_int, _name, _float, _float, _float, _opt_float, _opt_float, _opt_float, _int],
    },
    "eval_rows": {
        "columns": ["split", "graph", "bits", "top1", "top5"],
        "types": [_name, _int, _bits, _percent, _percent],
    },
    "loss_history": {"columns": ["step", "loss", "lr"], "types": [_int, _opt_float, _float]},
}


def _check_split_table(header: list, rows: list, path) -> None:
    if not header or header[0] != "Bits" or len(header) < 2:
        raise SchemaError(f"{path}: header must start with 'Bits' followed by split columns, got {header}")
    bad = [h for h in header[1:] if h not in SPLIT_HEADERS]
    if bad:
        raise SchemaError(f"{path}: unknown split columns {bad}")
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{i}: expected {len(header)} cells, got {len(row)}")
        if not _bits(row[0]):
            raise SchemaError(f"{path}:{i}: bad bit setting {row[0]!r}")
        for h, v in zip(header[1:], row[1:]):
            if not _cell(v):
                raise SchemaError(f"{path}:{i}: column {h} cell {v!r} is not 'mean±sem; max'")


def validate_csv(path, schema: str) -> int:
    """Validate ``path`` against a named schema and return the row count."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = list(csv.reader(fh))
    if not reader:
        raise SchemaError(f"{path}: empty file")
    header, rows = reader[0], reader[1:]
    if schema == "split_table":
        _check_split_table(header, rows, path)
        return len(rows)
    if schema not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema!r}")
    spec = SCHEMAS[schema]
    if header != list(spec["columns"]):
        raise SchemaError(f"{path}: header {header} does not match {list(spec['columns'])}")
    check: Callable = spec.get("row_check", lambda r: "")
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{i}: expected {len(header)} cells, got {len(row)}")
        record = dict(zip(header, row))
        diverged = spec.get("lenient_when_diverged") and record.get("Diverged") == "true"
        for col, typ, v in zip(header, spec["types"], row):
            if diverged and col in STUDY_COLUMNS[1:]:
                continue
            if not typ(v):
                raise SchemaError(f"{path}:{i}: column {col!r} has invalid value {v!r}")
        msg = check(record)
        if msg:
            raise SchemaError(f"{path}:{i}: {msg}")
    return len(rows)
