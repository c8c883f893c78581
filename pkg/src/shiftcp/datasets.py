"""CSV datasets: ``id,label,f0..f{d-1}[,scaffold][,fp]`` and ``id,l0..l{K-1}`` logits files."""

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import InputError, ParseError

_FEATURE = re.compile(r"^f(\d+)$")
_LOGIT = re.compile(r"^l(\d+)$")


@dataclass
class Dataset:
    ids: List[str]
    x: np.ndarray
    y: Optional[np.ndarray] = None
    scaffolds: Optional[List[str]] = None
    fingerprints: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] != len(self.ids):
            raise InputError("features must be an n x d matrix matching the ids")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=int)
            if self.y.shape != (len(self.ids),):
                raise InputError("one label per row is required")

    def __len__(self):
        return len(self.ids)

    @property
    def labeled(self):
        return self.y is not None

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            x=self.x[idx],
            y=None if self.y is None else self.y[idx],
            scaffolds=None if self.scaffolds is None else [self.scaffolds[i] for i in idx],
            fingerprints=None if self.fingerprints is None else self.fingerprints[idx],
        )


def _indexed_columns(header, pattern, kind, path):
    cols = [(int(m.group(1)), j) for j, name in enumerate(header) if (m := pattern.match(name))]
    cols.sort()
    if not cols:
        raise ParseError(f"header has no {kind} columns", path, 1)
    if [k for k, _ in cols] != list(range(len(cols))):
        raise ParseError(f"{kind} columns must be numbered 0..{len(cols) - 1}", path, 1)
    return [j for _, j in cols]


def _parse_float(text, what, path, line):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a number", path, line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} is not finite", path, line)
    return value


def _rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", path, 1) from None
        header = [h.strip() for h in header]
        rows = [(reader.line_num, row) for row in reader if row]
    return path, header, rows


def ingest_dataset(path, labeled=True, n_classes=None):
    """Read and validate a features file.

    ``labeled=False`` reads unlabeled files, which have no ``label`` column.
    When ``n_classes`` is given, labels must lie in ``0..n_classes-1``.
    """
    path, header, rows = _rows(path)
    if not header or header[0] != "id":
        raise ParseError("first column must be 'id'", path, 1)
    if labeled and "label" not in header:
        raise ParseError("labeled file has no 'label' column", path, 1)
    feature_cols = _indexed_columns(header, _FEATURE, "feature", path)
    label_col = header.index("label") if "label" in header else None
    scaffold_col = header.index("scaffold") if "scaffold" in header else None
    fp_col = header.index("fp") if "fp" in header else None

    ids, xs, ys, scaffolds, fps = [], [], [], [], []
    seen = set()
    for line, row in rows:
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
        ident = row[0].strip()
        if ident in seen:
            raise ParseError(f"duplicate id {ident!r}", path, line)
        seen.add(ident)
        ids.append(ident)
        xs.append([_parse_float(row[j], f"feature {header[j]}", path, line) for j in feature_cols])
        if labeled:
            text = row[label_col].strip()
            if not re.fullmatch(r"\d+", text):
                raise ParseError(f"label {text!r} is not a nonnegative integer", path, line)
            label = int(text)
            if n_classes is not None and label >= n_classes:
                raise ParseError(f"label {label} outside 0..{n_classes - 1}", path, line)
            ys.append(label)
        if scaffold_col is not None:
            scaffolds.append(row[scaffold_col].strip())
        if fp_col is not None:
            bits = row[fp_col].strip()
            if not bits or set(bits) - {"0", "1"}:
                raise ParseError("fingerprint must be a nonempty 0/1 string", path, line)
            if fps and len(bits) != len(fps[0]):
                raise ParseError(f"fingerprint length {len(bits)} != {len(fps[0])}", path, line)
            fps.append(bits)
    if not ids:
        raise ParseError("file has no data rows", path, 2)
    return Dataset(
        ids=ids,
        x=np.array(xs, dtype=float),
        y=np.array(ys, dtype=int) if labeled else None,
        scaffolds=scaffolds if scaffold_col is not None else None,
        fingerprints=(np.array([[c == "1" for c in b] for b in fps], dtype=bool)
                      if fp_col is not None else None),
    )


def read_logits(path):
    """Read ``id,l0..l{K-1}``; returns ``(ids, logits)``."""
    path, header, rows = _rows(path)
    if not header or header[0] != "id":
        raise ParseError("first column must be 'id'", path, 1)
    cols = _indexed_columns(header, _LOGIT, "logit", path)
    if len(cols) < 2:
        raise ParseError("need at least two logit columns", path, 1)
    ids, out = [], []
    for line, row in rows:
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
        ids.append(row[0].strip())
        out.append([_parse_float(row[j], f"logit {header[j]}", path, line) for j in cols])
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate ids in logits file", path)
    return ids, np.array(out, dtype=float).reshape(len(ids), len(cols))


def align_logits(ids, logit_ids, logits):
    """Rows of ``logits`` reordered to match ``ids``."""
    where = {k: i for i, k in enumerate(logit_ids)}
    missing = [k for k in ids if k not in where]
    if missing:
        raise InputError(f"no logits for id {missing[0]!r}")
    return logits[[where[k] for k in ids]]


def fmt(value):
    """Shortest round-trip text for a float."""
    return repr(float(value))


def write_dataset(path, data: Dataset):
    d = data.x.shape[1]
    header = ["id"] + (["label"] if data.labeled else []) + [f"f{j}" for j in range(d)]
    if data.scaffolds is not None:
        header.append("scaffold")
    if data.fingerprints is not None:
        header.append("fp")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, ident in enumerate(data.ids):
            row = [ident] + ([str(int(data.y[i]))] if data.labeled else [])
            row += [fmt(v) for v in data.x[i]]
            if data.scaffolds is not None:
                row.append(data.scaffolds[i])
            if data.fingerprints is not None:
                row.append("".join("1" if b else "0" for b in data.fingerprints[i]))
            writer.writerow(row)


def write_logits(path, ids, logits):
    logits = np.asarray(logits, dtype=float)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"l{k}" for k in range(logits.shape[1])])
        for ident, row in zip(ids, logits):
            writer.writerow([ident] + [fmt(v) for v in row])
