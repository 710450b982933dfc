"""Snapshot and dense-matrix files: a text header line followed by raw LE f64."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


@dataclass
class SnapshotSet:
    """Displacement snapshots, one 3n-vector per column, with provenance tags."""

    n: int
    columns: np.ndarray  # (3n, count)
    provenance: list = field(default_factory=list)  # (scenario name, step index) per column

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.ndim != 2 or cols.shape[0] != 3 * self.n:
            raise ValueError(f"expected a (3n={3 * self.n}, count) array, got shape {cols.shape}")
        self.columns = cols
        if self.provenance and len(self.provenance) != self.count:
            raise ValueError("one provenance tag per column required")

    @property
    def count(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def empty(cls, n: int) -> "SnapshotSet":
        return cls(n, np.zeros((3 * n, 0)))

    def extend(self, other: "SnapshotSet") -> "SnapshotSet":
        if other.n != self.n:
            raise ValueError("node counts differ")
        return SnapshotSet(self.n, np.hstack([self.columns, other.columns]), self.provenance + other.provenance)

    def select(self, scenario: str) -> np.ndarray:
        keep = [i for i, (name, _) in enumerate(self.provenance) if name == scenario]
        return self.columns[:, keep]


def _read_header(fh, tag, nfields):
    line = fh.readline().decode("ascii", errors="replace").split()
    if len(line) != nfields + 1 or line[0] != tag:
        raise FormatError(f"expected header '{tag}' with {nfields} sizes, got {' '.join(line)!r}")
    try:
        return [int(v) for v in line[1:]]
    except ValueError as exc:
        raise FormatError(f"bad size in header: {exc}") from None


def _read_payload(fh, count):
    data = np.frombuffer(fh.read(), dtype=_F64)
    if data.size != count:
        raise FormatError(f"expected {count} float64 values, found {data.size}")
    return data.astype(float)


def save_snapshots(path, snaps: SnapshotSet) -> None:
    """Write ``snapshots <n> <count>`` + column-major floats, plus a ``.prov.json`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"snapshots {snaps.n} {snaps.count}\n".encode("ascii"))
        fh.write(np.asarray(snaps.columns.T, dtype=_F64).tobytes())
    prov = [[str(name), int(step)] for name, step in snaps.provenance]
    path.with_suffix(path.suffix + ".prov.json").write_text(json.dumps(prov) + "\n")


def load_snapshots(path) -> SnapshotSet:
    path = Path(path)
    with open(path, "rb") as fh:
        n, count = _read_header(fh, "snapshots", 2)
        data = _read_payload(fh, 3 * n * count)
    cols = data.reshape(count, 3 * n).T.copy()
    side = path.with_suffix(path.suffix + ".prov.json")
    prov = [tuple(p) for p in json.loads(side.read_text())] if side.exists() else []
    return SnapshotSet(n, cols, prov)


def save_matrix(path, a: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    with open(path, "wb") as fh:
        fh.write(f"matrix {a.shape[0]} {a.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a, dtype=_F64).tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = _read_header(fh, "matrix", 2)
        return _read_payload(fh, rows * cols).reshape(rows, cols)
