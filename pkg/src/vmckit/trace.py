"""Per-step trace records and their versioned CSV format.

File layout::

    # vmckit-trace v1
    # kind: vmc
    # sampling: exact
    # <key>: <value>          (any further metadata lines)
    step,eta,energy_est,...
    0,0.1,1.2,...

Undefined optional values are written as empty fields.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

TRACE_VERSION = "v1"
MAGIC = "# vmckit-trace"

COLUMNS = {
    "vmc": ["step", "eta", "energy_est", "energy_exact", "grad_norm", "grad_norm_exact",
            "runmin_grad_norm", "lipschitz_est", "acceptance_rate"],
    "pretrain": ["step", "eta", "loss_est", "loss_exact", "grad_norm", "grad_norm_exact",
                 "runmin_grad_norm", "lipschitz_est", "acceptance_rate", "si_loss", "angle",
                 "z_tilde", "norm_ratio"],
    "orbital": ["step", "eta", "loss_est", "grad_norm", "runmin_grad_norm", "angle"],
}


class TraceError(ValueError):
    pass


@dataclass
class TraceRow:
    step: int
    eta: float
    energy_est: Optional[float] = None
    energy_exact: Optional[float] = None
    loss_est: Optional[float] = None
    loss_exact: Optional[float] = None
    grad_norm: Optional[float] = None
    grad_norm_exact: Optional[float] = None
    runmin_grad_norm: Optional[float] = None
    lipschitz_est: Optional[float] = None
    acceptance_rate: Optional[float] = None
    si_loss: Optional[float] = None
    angle: Optional[float] = None
    z_tilde: Optional[float] = None
    norm_ratio: Optional[float] = None

    def is_finite(self) -> bool:
        return all(v is None or math.isfinite(v) for v in
                   (getattr(self, f.name) for f in fields(self)))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def format_trace(rows, kind: str, meta: dict) -> str:
    if kind not in COLUMNS:
        raise TraceError(f"unknown trace kind {kind!r}")
    cols = COLUMNS[kind]
    out = io.StringIO()
    out.write(f"{MAGIC} {TRACE_VERSION}\n")
    out.write(f"# kind: {kind}\n")
    for key, value in meta.items():
        out.write(f"# {key}: {value}\n")
    out.write(",".join(cols) + "\n")
    for row in rows:
        out.write(",".join(_fmt(getattr(row, c)) for c in cols) + "\n")
    return out.getvalue()


def write_trace(path, rows, kind: str, meta: dict) -> None:
    Path(path).write_text(format_trace(rows, kind, meta))


@dataclass
class Trace:
    path: str
    kind: str
    meta: dict
    columns: list
    data: dict  # column -> list of float | None

    def column(self, name):
        return self.data[name]


def read_trace(path) -> Trace:
    path = str(path)
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise TraceError(f"{path}: empty trace file")
    first = lines[0].split()
    if len(first) != 3 or " ".join(first[:2]) != MAGIC:
        raise TraceError(f"{path}:1: not a vmckit trace")
    if first[2] != TRACE_VERSION:
        raise TraceError(f"{path}:1: unsupported trace version {first[2]!r}")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].partition(":")
        meta[key.strip()] = value.strip()
        i += 1
    if i >= len(lines):
        raise TraceError(f"{path}: missing column header")
    kind = meta.get("kind", "")
    reader = csv.reader(lines[i:])
    columns = next(reader)
    data = {c: [] for c in columns}
    for offset, rec in enumerate(reader):
        lineno = i + 2 + offset
        if len(rec) != len(columns):
            raise TraceError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(rec)}")
        for c, v in zip(columns, rec):
            try:
                data[c].append(float(v) if v != "" else None)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: bad number {v!r} in column {c}") from None
    if not data.get("step"):
        raise TraceError(f"{path}: trace has no rows")
    return Trace(path, kind, meta, columns, data)
