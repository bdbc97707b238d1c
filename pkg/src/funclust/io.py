"""Reading long-format series and sidecar files; writing run artifacts.

Series files have a header ``subject_id,idx,value`` with indices running
from 0 within each subject; an empty or ``NA`` value marks a missing
observation. Sidecar files have ``subject_id`` plus any of ``min_ar``,
``landmark`` and further numeric columns, one row per subject.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError
from .preprocess import RawSeries

MISSING = {"", "na", "nan", "null", "none"}


def fmt(value) -> str:
    """Seventeen significant digits, enough for an exact round trip."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".17g")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_float(text: str, line: int, what: str) -> float:
    if text.strip().lower() in MISSING:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"cannot parse {what} {text!r}", line) from None


def _reader(path):
    fh = open(path, newline="", encoding="utf-8")
    return fh, csv.reader(fh)


def read_series(path) -> list[RawSeries]:
    """Parse a long-format series file into one :class:`RawSeries` per subject.

    Subjects keep the order of their first appearance.
    """
    fh, rows = _reader(path)
    with fh:
        header = next(rows, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        try:
            i_sid, i_idx, i_val = (cols.index(c) for c in ("subject_id", "idx", "value"))
        except ValueError:
            raise IngestError("header must contain subject_id, idx and value", 1) from None
        values: dict[str, dict[int, float]] = {}
        for line, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line)
            sid = row[i_sid].strip()
            if not sid:
                raise IngestError("empty subject_id", line)
            try:
                idx = int(row[i_idx])
            except ValueError:
                raise IngestError(f"cannot parse index {row[i_idx]!r}", line) from None
            bucket = values.setdefault(sid, {})
            if idx in bucket:
                raise IngestError(f"duplicate index {idx} for subject {sid!r}", line)
            bucket[idx] = _parse_float(row[i_val], line, "value")
    if not values:
        raise IngestError(f"{path}: no data rows")
    out = []
    for sid, bucket in values.items():
        n = len(bucket)
        if sorted(bucket) != list(range(n)):
            raise IngestError(f"indices of subject {sid!r} are not contiguous from 0")
        out.append(RawSeries(sid, np.array([bucket[j] for j in range(n)])))
    return out


def read_sidecar(path) -> dict[str, dict[str, float]]:
    """Map subject id to its numeric sidecar fields (missing entries omitted)."""
    fh, rows = _reader(path)
    with fh:
        header = next(rows, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        cols = [c.strip() for c in header]
        if "subject_id" not in cols:
            raise IngestError("sidecar header must contain subject_id", 1)
        i_sid = cols.index("subject_id")
        out: dict[str, dict[str, float]] = {}
        for line, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(cols):
                raise IngestError(f"expected {len(cols)} fields, got {len(row)}", line)
            sid = row[i_sid].strip()
            if sid in out:
                raise IngestError(f"duplicate subject {sid!r}", line)
            fields = {}
            for j, name in enumerate(cols):
                if j == i_sid:
                    continue
                v = _parse_float(row[j], line, name)
                if not math.isnan(v):
                    fields[name] = v
            out[sid] = fields
    return out


def attach_landmarks(raws: Sequence[RawSeries], sidecar: dict) -> None:
    for raw in raws:
        lm = sidecar.get(raw.subject_id, {}).get("landmark")
        raw.landmark = lm


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_json(path, obj) -> None:
    # json writes floats with repr, the shortest string that round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_series(path, observations, values_attr: str = "values") -> None:
    rows = []
    for obs in observations:
        for j, v in enumerate(getattr(obs, values_attr)):
            rows.append((str(obs.subject_id), j, v))
    write_csv(path, ["subject_id", "idx", "value"], rows)


def write_sidecar(path, observations, names: Sequence[str] = ()) -> None:
    header = ["subject_id", "landmark", *names]
    rows = []
    for obs in observations:
        cov = [] if obs.covariates is None else list(obs.covariates)
        rows.append((str(obs.subject_id), "", *cov))
    write_csv(path, header, rows)


def write_matrix(path, matrix, labels: Sequence[str]) -> None:
    rows = [(labels[i], *row) for i, row in enumerate(np.asarray(matrix))]
    write_csv(path, ["", *labels], rows)


def as_path(p) -> Path:
    return p if isinstance(p, Path) else Path(p)
