"""Trajectory CSV files.

Single-stage files carry the columns ``x_1..x_d, a, y`` and optionally ``p``;
multi-stage files are in long format with leading ``id, t`` columns, one row
per (trajectory, stage). Floats are written with 17 significant digits so a
write/read cycle reproduces every record bit for bit.
"""
from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidRecordError, StructuralError
from .qcore import ActionSet, StageData, TrajectoryDataset

_X_COL = re.compile(r"^x_(\d+)$")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectories_csv(data: TrajectoryDataset, path) -> None:
    has_p = all(s.p is not None for s in data.stages)
    multi = data.T > 1
    d = data.stage(1).d
    if multi and any(s.d != d for s in data.stages):
        raise StructuralError("long-format CSV needs the same covariate dimension at every stage")
    header = (["id", "t"] if multi else []) + [f"x_{j}" for j in range(1, d + 1)] + ["a", "y"] + (["p"] if has_p else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, tid in enumerate(data.ids):
            for t, s in enumerate(data.stages, start=1):
                row = ([tid, t] if multi else []) + [_fmt(v) for v in s.x[i]] + [int(s.a[i]), _fmt(s.y[i])]
                if has_p:
                    row.append(_fmt(s.p[i]))
                writer.writerow(row)


def _parse_header(header: list):
    header = [h.strip() for h in header]
    xcols = sorted(((int(_X_COL.match(h).group(1)), i) for i, h in enumerate(header) if _X_COL.match(h)))
    if not xcols:
        raise InvalidRecordError("header needs covariate columns x_1..x_d")
    if [k for k, _ in xcols] != list(range(1, len(xcols) + 1)):
        raise InvalidRecordError("covariate columns must be x_1..x_d without gaps")
    for name in ("a", "y"):
        if name not in header:
            raise InvalidRecordError(f"header is missing the {name!r} column")
    known = {"id", "t", "a", "y", "p"} | {header[i] for _, i in xcols}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise InvalidRecordError(f"unexpected columns {unknown}")
    multi = "id" in header or "t" in header
    if multi and not ("id" in header and "t" in header):
        raise InvalidRecordError("long-format files need both 'id' and 't' columns")
    pos = {h: i for i, h in enumerate(header)}
    return pos, [i for _, i in xcols], multi


def _parse_row(row, lineno, pos, xidx, has_p):
    try:
        x = [float(row[i]) for i in xidx]
        a_raw = float(row[pos["a"]])
        y = float(row[pos["y"]])
        p = float(row[pos["p"]]) if has_p else None
    except ValueError as exc:
        raise InvalidRecordError(f"row {lineno}: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise InvalidRecordError(f"row {lineno}: covariates must be finite")
    if a_raw != round(a_raw):
        raise InvalidRecordError(f"row {lineno}: action {row[pos['a']]!r} is not an integer label")
    if not y >= 0 or not np.isfinite(y):
        raise InvalidRecordError(f"row {lineno}: outcome must be finite and nonnegative, got {row[pos['y']]!r}")
    if has_p and not (0 < p <= 1):
        raise InvalidRecordError(f"row {lineno}: propensity must lie in (0, 1], got {row[pos['p']]!r}")
    return x, int(a_raw), y, p


def read_trajectories_csv(path, actions: Optional[ActionSet] = None) -> TrajectoryDataset:
    """Read a single-stage or long-format trajectory CSV.

    Action labels default to the sorted labels seen in the file. Errors name
    the offending (1-based, header = row 1) row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidRecordError(f"{path}: file is empty") from None
        pos, xidx, multi = _parse_header(header)
        has_p = "p" in pos
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidRecordError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            x, a, y, p = _parse_row(row, lineno, pos, xidx, has_p)
            if multi:
                tid = row[pos["id"]].strip()
                try:
                    t = int(row[pos["t"]])
                except ValueError:
                    raise InvalidRecordError(f"row {lineno}: stage index {row[pos['t']]!r} is not an integer") from None
            else:
                tid, t = len(records) + 1, 1
            records.append((lineno, tid, t, x, a, y, p))
    if not records:
        raise InvalidRecordError(f"{path}: no data rows")
    labels = sorted({r[4] for r in records})
    if actions is None:
        if len(labels) < 2:
            raise InvalidRecordError(f"{path}: only one action label observed; pass the action set explicitly")
        actions = ActionSet(tuple(labels))
    return _assemble(records, actions, multi, has_p)


def _assemble(records, actions, multi, has_p) -> TrajectoryDataset:
    if not multi:
        x = np.array([r[3] for r in records])
        return TrajectoryDataset.single_stage(
            x, [r[4] for r in records], [r[5] for r in records], [r[6] for r in records] if has_p else None, actions
        )
    by_id: dict = {}
    for rec in records:
        by_id.setdefault(rec[1], []).append(rec)
    T = None
    for tid, recs in by_id.items():
        stages = [r[2] for r in recs]
        if stages != list(range(1, len(recs) + 1)):
            raise InvalidRecordError(
                f"row {recs[0][0]}: trajectory {tid!r} stages {stages} do not run contiguously from 1"
            )
        if T is None:
            T = len(recs)
        elif len(recs) != T:
            raise InvalidRecordError(f"row {recs[0][0]}: trajectory {tid!r} has {len(recs)} stages, expected {T}")
    ids = list(by_id)
    stages = []
    for t in range(T):
        rows = [by_id[tid][t] for tid in ids]
        stages.append(StageData(np.array([r[3] for r in rows]), [r[4] for r in rows], [r[5] for r in rows],
                                [r[6] for r in rows] if has_p else None))
    return TrajectoryDataset(tuple(stages), actions, tuple(ids))


def csv_has_propensity(path) -> bool:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return "p" in [h.strip() for h in header]


def output_paths(out) -> tuple:
    """``(prefix.json, prefix.csv)`` for an output prefix (a trailing .json/.csv is dropped)."""
    out = Path(out)
    if out.suffix in (".json", ".csv"):
        out = out.with_suffix("")
    return out.with_name(out.name + ".json"), out.with_name(out.name + ".csv")
