"""CSV serialization of fields, sinograms, charts and reports.

Floats are written with ``%.17g`` so a write/read cycle reproduces every
value bitwise.  Malformed input raises :class:`ParseError` carrying the
1-based line number.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .fields import Grid, SymTensorField
from .symtensor import component_labels
from .transforms import MomentSinogram

__all__ = [
    "ParseError",
    "FIELD_PREFIX",
    "SINOGRAM_HEADER",
    "CHART_HEADER",
    "REPORT_HEADER",
    "write_field",
    "read_field",
    "write_sinogram",
    "read_sinogram",
    "read_sinograms",
    "write_chart",
    "write_decomposition",
    "write_rows",
    "write_report",
    "read_report",
]

FIELD_PREFIX = ["x1", "x2", "mask"]
SINOGRAM_HEADER = ["geodesic_id", "boundary_angle", "dir_angle", "q", "value"]
CHART_HEADER = ["xp", "xn", "world_x1", "world_x2", "g11", "g12", "g22"]
REPORT_HEADER = ["name", "value", "threshold", "pass"]


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_rows(path, header, rows) -> Path:
    """Header plus numeric rows, one ``%.17g`` value per cell (ints verbatim)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (int, np.integer)) else _fmt(float(v)) for v in row) + "\n")
    return path


def _read_table(path, expected=None):
    """Header and rows of floats; ``expected`` (list) must equal the header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if expected is not None and header != list(expected):
            raise ParseError(path, 1, f"header {header} does not match {list(expected)}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(path, line, str(exc)) from None
    return header, rows


# --------------------------------------------------------------------------
# fields


def write_field(path, f: SymTensorField) -> Path:
    """Row-major nodes: ``x1,x2,mask,c_<sorted 1-based index>...``."""
    pts = f.grid.points().reshape(-1, 2)
    vals = f.values.reshape(-1, f.n_comps)
    mask = f.mask.ravel()
    header = FIELD_PREFIX + component_labels(f.dim, f.order)
    rows = (
        [pts[i, 0], pts[i, 1], int(mask[i])] + list(vals[i]) for i in range(pts.shape[0])
    )
    return write_rows(path, header, rows)


def _order_from_labels(path, labels) -> int:
    order = len(labels[0]) - 2 if labels else 0
    if component_labels(2, order) != labels:
        raise ParseError(path, 1, f"component columns {labels} do not form a packed 2-D tensor")
    return order


def read_field(path, order: int | None = None) -> SymTensorField:
    """Inverse of :func:`write_field`.  ``order``, if given, must match the header."""
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline().rstrip("\r\n").split(",")
    if first[:3] != FIELD_PREFIX:
        raise ParseError(path, 1, f"header must start with {FIELD_PREFIX}")
    labels = first[3:]
    if order is not None and labels != component_labels(2, order):
        raise ParseError(
            path, 1, f"{len(labels)} component columns for declared order {order}, expected {component_labels(2, order)}"
        )
    k_order = _order_from_labels(path, labels) if order is None else order
    _, rows = _read_table(path, first)
    n = math.isqrt(len(rows))
    if n * n != len(rows) or n < 3:
        raise ParseError(path, len(rows) + 1, f"{len(rows)} data rows do not form a square grid")
    data = np.array(rows)
    grid = Grid(n, float(np.max(np.abs(data[:, 0]))))
    expect = grid.points().reshape(-1, 2)
    bad = np.flatnonzero(np.abs(data[:, :2] - expect).max(axis=1) > 1e-9 * grid.half_width)
    if bad.size:
        raise ParseError(path, int(bad[0]) + 2, "node coordinates are not in row-major grid order")
    mask_col = data[:, 2]
    if not np.all((mask_col == 0) | (mask_col == 1)):
        line = int(np.flatnonzero((mask_col != 0) & (mask_col != 1))[0]) + 2
        raise ParseError(path, line, "mask must be 0 or 1")
    vals = data[:, 3:].reshape(n, n, -1)
    mask = mask_col.reshape(n, n).astype(bool)
    return SymTensorField(k_order, grid, vals, mask)


# --------------------------------------------------------------------------
# sinograms


def write_sinogram(path, sinos) -> Path:
    """One or several sinograms (stacked by ``q``) in fan order."""
    if isinstance(sinos, MomentSinogram):
        sinos = [sinos]
    rows = []
    for s in sinos:
        for i in range(len(s)):
            rows.append([i, s.boundary_angles[i], s.dir_angles[i], s.q, s.values[i]])
    return write_rows(path, SINOGRAM_HEADER, rows)


def read_sinograms(path, order: int = 0) -> list[MomentSinogram]:
    """All sinograms of a file, sorted by ``q``; rows keep file (fan) order."""
    _, rows = _read_table(path, SINOGRAM_HEADER)
    groups: dict[int, list] = {}
    for lineno, row in enumerate(rows, start=2):
        q = row[3]
        if q != int(q) or q < 0:
            raise ParseError(path, lineno, f"moment order {q} is not a non-negative integer")
        grp = groups.setdefault(int(q), [])
        if row[0] != len(grp):
            raise ParseError(path, lineno, f"geodesic_id {row[0]:g} out of sequence (expected {len(grp)})")
        grp.append(row)
    out = []
    for q in sorted(groups):
        a = np.array(groups[q])
        out.append(MomentSinogram(q, order, a[:, 1], a[:, 2], a[:, 4]))
    return out


def read_sinogram(path, order: int = 0) -> MomentSinogram:
    sinos = read_sinograms(path, order)
    if len(sinos) != 1:
        raise ParseError(path, 1, f"expected one moment order, found {len(sinos)}")
    return sinos[0]


# --------------------------------------------------------------------------
# charts, decompositions, reports


def write_chart(path, chart) -> Path:
    return write_rows(path, CHART_HEADER, chart.dump_rows())


def write_decomposition(prefix, dec) -> list[Path]:
    """``<prefix>_fs.csv`` and ``<prefix>_v.csv``, or ``<prefix>_vk<i>.csv``
    for every part of a multi-decomposition."""
    prefix = str(prefix)
    if hasattr(dec, "f_s"):
        return [write_field(prefix + "_fs.csv", dec.f_s), write_field(prefix + "_v.csv", dec.v)]
    return [write_field(f"{prefix}_vk{i}.csv", p) for i, p in enumerate(dec.parts)]


def write_report(path, checks) -> Path:
    """Rows ``name,value,threshold,pass`` for check objects with those attributes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(",".join(REPORT_HEADER) + "\n")
        for c in checks:
            fh.write(f"{c.name},{_fmt(c.value)},{_fmt(c.threshold)},{'true' if c.passed else 'false'}\n")
    return path


def read_report(path) -> list[tuple[str, float, float, bool]]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ParseError(path, 1, f"header {header} does not match {REPORT_HEADER}")
        for row in reader:
            if len(row) != 4 or row[3] not in ("true", "false"):
                raise ParseError(path, reader.line_num, "malformed report row")
            try:
                out.append((row[0], float(row[1]), float(row[2]), row[3] == "true"))
            except ValueError as exc:
                raise ParseError(path, reader.line_num, str(exc)) from None
    return out
