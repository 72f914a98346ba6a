"""Columnar row batches and in-memory tables backed by CSV plus Mvec sidecar files.

A table ``t`` lives in ``t.csv``; a tensor column ``c`` appears in the CSV
header with empty cells and its values are the frames of ``t.c.mvec``, one
per row, concatenated.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from taskdb.errors import CorruptFrame, ShapeMismatch
from taskdb.tensor import Mvec, mvec_serialize, read_frames

_INT = re.compile(r"^[-+]?\d+$")


@dataclass
class RowBatch:
    columns: dict = field(default_factory=dict)   # name -> list of values

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ShapeMismatch(f"columns have differing lengths {sorted(lengths)}")

    @property
    def row_count(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def rows(self) -> Iterator[dict]:
        names = list(self.columns)
        for values in zip(*self.columns.values()):
            yield dict(zip(names, values))

    def tuples(self) -> list[tuple]:
        return list(zip(*self.columns.values())) if self.columns else []

    @classmethod
    def from_rows(cls, names: Sequence[str], rows: Iterable[dict]) -> "RowBatch":
        cols = {n: [] for n in names}
        for r in rows:
            for n in names:
                cols[n].append(r[n])
        return cls(cols)

    @classmethod
    def concat(cls, names: Sequence[str], batches: Iterable["RowBatch"]) -> "RowBatch":
        cols = {n: [] for n in names}
        for b in batches:
            for n in names:
                cols[n].extend(b.columns[n])
        return cls(cols)

    def slice(self, start: int, stop: int) -> "RowBatch":
        return RowBatch({n: v[start:stop] for n, v in self.columns.items()})


@dataclass
class Table:
    name: str
    columns: dict   # column -> list, all equal length

    def __post_init__(self):
        RowBatch(self.columns)

    @property
    def row_count(self) -> int:
        return RowBatch(self.columns).row_count

    @property
    def column_names(self) -> list[str]:
        return list(self.columns)


def _parse_cell(s: str):
    if s == "":
        return None
    if _INT.match(s):
        return int(s)
    try:
        return float(s)
    except ValueError:
        return s


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_table(path: str | os.PathLike) -> Table:
    path = Path(path)
    name = path.stem
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CorruptFrame(f"{path}: empty table file")
        rows = list(reader)
    columns = {h: [] for h in header}
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise CorruptFrame(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            columns[h].append(_parse_cell(cell))
    for h in header:
        side = path.with_name(f"{name}.{h}.mvec")
        if side.exists():
            frames = read_frames(side.read_bytes())
            if len(frames) != len(rows):
                raise CorruptFrame(f"{side}: {len(frames)} frames for {len(rows)} rows")
            columns[h] = frames
    return Table(name, columns)


def save_table(table: Table, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_cols = [c for c, v in table.columns.items() if v and isinstance(v[0], Mvec)]
    path = directory / f"{table.name}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table.column_names)
        for values in zip(*table.columns.values()):
            w.writerow(["" if c in tensor_cols else _format_cell(v) for c, v in zip(table.column_names, values)])
    for c in tensor_cols:
        (directory / f"{table.name}.{c}.mvec").write_bytes(b"".join(mvec_serialize(m) for m in table.columns[c]))
    return path


def load_tables(directory: str | os.PathLike) -> dict:
    directory = Path(directory)
    if not directory.exists():
        return {}
    return {p.stem: load_table(p) for p in sorted(directory.glob("*.csv"))}
