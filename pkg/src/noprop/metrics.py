"""Metrics rows and their CSV stream.

The main CSV holds only deterministic columns so that a repeated seeded run
reproduces it byte for byte.  Wall-clock seconds go to a sidecar file
``<metrics>.timing.csv`` keyed by row index.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

COLUMNS = ("epoch", "block", "ce", "kl", "l2", "train_acc", "test_acc", "peak_nodes")
TIMING_COLUMNS = ("row", "wall_seconds")


@dataclass
class MetricsRow:
    epoch: int
    block: str
    ce: float | None = None
    kl: float | None = None
    l2: float | None = None
    train_acc: float | None = None
    test_acc: float | None = None
    peak_nodes: int | None = None
    wall_seconds: float = 0.0

    def csv_fields(self) -> list[str]:
        out = []
        for col in COLUMNS:
            v = getattr(self, col)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.10g}")
            else:
                out.append(str(v))
        return out


def timing_path(path) -> str:
    root, _ = os.path.splitext(str(path))
    return root + ".timing.csv"


class MetricsWriter:
    """Append-only CSV writer, flushed after every row; ``path=None`` keeps rows in memory only."""

    def __init__(self, path=None):
        self.rows: list[MetricsRow] = []
        self.path = path
        self._fh = self._tfh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._tfh = open(timing_path(path), "w", newline="", encoding="utf-8")
            self._csv = csv.writer(self._fh, lineterminator="\n")
            self._tcsv = csv.writer(self._tfh, lineterminator="\n")
            self._csv.writerow(COLUMNS)
            self._tcsv.writerow(TIMING_COLUMNS)
            self._flush()

    def _flush(self):
        for fh in (self._fh, self._tfh):
            fh.flush()

    def write(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow(row.csv_fields())
            self._tcsv.writerow([len(self.rows) - 1, f"{row.wall_seconds:.6f}"])
            self._flush()

    def close(self):
        for fh in (self._fh, self._tfh):
            if fh is not None:
                fh.close()
        self._fh = self._tfh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV joined with the timing sidecar when it exists."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    tpath = timing_path(path)
    if os.path.exists(tpath):
        with open(tpath, newline="", encoding="utf-8") as fh:
            for t in csv.DictReader(fh):
                i = int(t["row"])
                if i < len(rows):
                    rows[i]["wall_seconds"] = t["wall_seconds"]
    return rows
