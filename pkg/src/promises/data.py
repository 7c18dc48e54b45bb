"""Dataset model and file IO for matrices, coordinates and cohort manifests.

Matrices are plain 2-D ``float64`` numpy arrays. Two on-disk formats are
supported:

``csv``
    Headerless comma separated rows, written with 17 significant digits.
``dmat``
    The magic bytes ``PMX1``, then rows and cols as unsigned 64-bit
    little-endian integers, then the row-major float64 little-endian payload.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DMAT_MAGIC",
    "PromisesError",
    "ValidationError",
    "LoadError",
    "as_matrix",
    "SubjectScan",
    "VoxelCoordinates",
    "Cohort",
    "load_matrix",
    "save_matrix",
    "load_coords",
    "save_coords",
    "load_labels",
    "save_labels",
    "load_manifest",
    "save_manifest",
]

DMAT_MAGIC = b"PMX1"
_DMAT_HEADER = struct.Struct("<4sQQ")
COORD_UNITS = ("voxel-index", "millimeter")


class PromisesError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(PromisesError, ValueError):
    """Input failed a precondition check."""


class LoadError(ValidationError):
    """A file could not be parsed under its declared format."""


def _frozen(a):
    a.setflags(write=False)
    return a


def as_matrix(values, name="matrix"):
    """Return `values` as a finite 2-D float64 array with at least one entry."""
    a = np.array(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got {a.ndim} dimension(s)")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        r, c = np.argwhere(~np.isfinite(a))[0]
        raise ValidationError(f"{name} has a non-finite value at row {r + 1}, col {c + 1}")
    return a


@dataclass(frozen=True)
class SubjectScan:
    """One subject's time-by-voxel response matrix."""

    subject_id: str
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(as_matrix(self.data, f"scan {self.subject_id!r}")))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class VoxelCoordinates:
    """Spatial location of every voxel as an ``(v, 3)`` array."""

    entries: np.ndarray
    units: str = "voxel-index"

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 1:
            raise ValidationError(f"coordinates must have shape (v, 3), got {a.shape}")
        if not np.all(np.isfinite(a)):
            r = int(np.argwhere(~np.isfinite(a))[0][0])
            raise ValidationError(f"non-finite coordinate in row {r + 1}")
        if self.units not in COORD_UNITS:
            raise ValidationError(f"units must be one of {COORD_UNITS}, got {self.units!r}")
        object.__setattr__(self, "entries", _frozen(a))

    def __len__(self):
        return self.entries.shape[0]

    def scaled(self, voxel_size):
        """Convert voxel-index coordinates to millimeters."""
        if self.units == "millimeter":
            return self
        return VoxelCoordinates(self.entries * np.asarray(voxel_size, dtype=float), "millimeter")


@dataclass(frozen=True)
class Cohort:
    """A set of time-synchronized subject scans sharing one shape."""

    scans: tuple
    coords: Optional[VoxelCoordinates] = None
    labels: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        scans = tuple(self.scans)
        if len(scans) < 1:
            raise ValidationError("cohort has no scans")
        ids = [s.subject_id for s in scans]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids in cohort")
        shape = scans[0].shape
        for s in scans[1:]:
            if s.shape != shape:
                raise ValidationError(
                    f"scan {s.subject_id!r} has shape {s.shape}, expected {shape} "
                    f"(from {scans[0].subject_id!r})"
                )
        if self.coords is not None and len(self.coords) != shape[1]:
            raise ValidationError(f"{len(self.coords)} coordinates given for {shape[1]} voxels")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (shape[0],):
                raise ValidationError(f"labels must have length t={shape[0]}, got shape {labels.shape}")
            object.__setattr__(self, "labels", _frozen(labels.copy()))
        object.__setattr__(self, "scans", scans)

    @classmethod
    def from_arrays(cls, arrays, ids=None, coords=None, labels=None):
        if ids is None:
            ids = [f"sub-{i + 1:02d}" for i in range(len(arrays))]
        return cls(tuple(SubjectScan(i, a) for i, a in zip(ids, arrays)), coords, labels)

    @property
    def m(self):
        return len(self.scans)

    @property
    def t(self):
        return self.scans[0].shape[0]

    @property
    def v(self):
        return self.scans[0].shape[1]

    @property
    def ids(self):
        return [s.subject_id for s in self.scans]

    @property
    def arrays(self):
        return [s.data for s in self.scans]

    def require_group(self):
        if self.m < 2:
            raise ValidationError(f"group alignment needs at least 2 subjects, got {self.m}")

    def subset(self, indices):
        """Cohort restricted to the scans at `indices`, in that order."""
        return Cohort(tuple(self.scans[i] for i in indices), self.coords, self.labels)

    def without(self, index):
        return self.subset([i for i in range(self.m) if i != index])

    def time_slice(self, rows):
        if not isinstance(rows, slice):
            rows = np.asarray(rows)
        labels = None if self.labels is None else self.labels[rows]
        return Cohort(
            tuple(SubjectScan(s.subject_id, s.data[rows]) for s in self.scans), self.coords, labels
        )


# ---------------------------------------------------------------------------
# matrix IO
# ---------------------------------------------------------------------------

def _format_of(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "dmat"):
            raise ValidationError(f"unknown matrix format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "dmat"


def load_matrix(path, format=None):
    """Load a matrix from `path`.

    `format` is ``"csv"`` or ``"dmat"``; when omitted it is inferred from the
    file extension (``.csv`` means csv, anything else dmat).
    """
    fmt = _format_of(path, format)
    if fmt == "dmat":
        return _load_dmat(path)
    return _load_csv_matrix(path)


def save_matrix(m, path, format=None):
    fmt = _format_of(path, format)
    a = as_matrix(m)
    if fmt == "dmat":
        with open(path, "wb") as fh:
            fh.write(_DMAT_HEADER.pack(DMAT_MAGIC, a.shape[0], a.shape[1]))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))
    else:
        with open(path, "w", newline="") as fh:
            for row in a:
                fh.write(",".join(format_float(x) for x in row))
                fh.write("\n")


def format_float(x):
    # 17 significant digits round-trip every float64 exactly
    return format(float(x), ".17g")


def _load_dmat(path):
    with open(path, "rb") as fh:
        head = fh.read(_DMAT_HEADER.size)
        if len(head) != _DMAT_HEADER.size:
            raise LoadError(f"{path}: truncated dmat header")
        magic, rows, cols = _DMAT_HEADER.unpack(head)
        if magic != DMAT_MAGIC:
            raise LoadError(f"{path}: bad magic {magic!r}, expected {DMAT_MAGIC!r}")
        if rows < 1 or cols < 1:
            raise LoadError(f"{path}: header declares empty matrix {rows}x{cols}")
        payload = fh.read()
    if len(payload) != rows * cols * 8:
        raise LoadError(
            f"{path}: payload has {len(payload)} bytes, header declares {rows}x{cols} "
            f"({rows * cols * 8} bytes)"
        )
    a = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        r, c = bad[0]
        raise LoadError(f"{path}: non-finite value at row {r + 1}, col {c + 1}")
    return a


def _load_csv_matrix(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    x = float(cell)
                except ValueError:
                    raise LoadError(f"{path}: unparseable value {cell!r} at row {lineno}, col {col}") from None
                if not math.isfinite(x):
                    raise LoadError(f"{path}: non-finite value {cell!r} at row {lineno}, col {col}")
                vals.append(x)
            if rows and len(vals) != len(rows[0]):
                raise LoadError(
                    f"{path}: ragged row {lineno} has {len(vals)} values, expected {len(rows[0])}"
                )
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: empty matrix file")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# coordinates and labels
# ---------------------------------------------------------------------------

def load_coords(path, units="voxel-index"):
    """Read a CSV with header ``x,y,z`` into :class:`VoxelCoordinates`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ("x", "y", "z") if c not in header]
        if missing:
            raise LoadError(f"{path}: coordinates header lacks column(s) {', '.join(missing)}")
        reader.fieldnames = header
        out = []
        for lineno, rec in enumerate(reader, start=2):
            triple = []
            for c in ("x", "y", "z"):
                try:
                    x = float(rec[c])
                except (TypeError, ValueError):
                    raise LoadError(f"{path}: bad {c} value {rec[c]!r} on line {lineno}") from None
                if not math.isfinite(x):
                    raise LoadError(f"{path}: non-finite {c} value on line {lineno}")
                triple.append(x)
            out.append(triple)
    if not out:
        raise LoadError(f"{path}: no coordinates")
    return VoxelCoordinates(np.array(out), units)


def save_coords(coords, path):
    with open(path, "w", newline="") as fh:
        fh.write("x,y,z\n")
        for row in coords.entries:
            fh.write(",".join(format_float(x) for x in row) + "\n")


def load_labels(path):
    """One integer class label per line (per time point)."""
    with open(path) as fh:
        vals = [line.strip() for line in fh if line.strip()]
    try:
        return np.array([int(x) for x in vals])
    except ValueError as exc:
        raise LoadError(f"{path}: labels must be integers ({exc})") from None


def save_labels(labels, path):
    with open(path, "w") as fh:
        fh.write("".join(f"{int(x)}\n" for x in labels))


# ---------------------------------------------------------------------------
# cohort manifests
# ---------------------------------------------------------------------------

def load_manifest(path, units=None):
    """Load a cohort from a JSON manifest.

    The manifest maps subject ids to matrix files and may name a coordinates
    CSV and a labels file::

        {"subjects": {"sub-01": "sub-01.dmat", ...},
         "coords": "coords.csv", "units": "voxel-index", "labels": "labels.txt"}

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: cannot read manifest ({exc})") from None
    if not isinstance(doc.get("subjects"), dict) or not doc["subjects"]:
        raise LoadError(f"{path}: manifest needs a non-empty 'subjects' mapping")
    base = path.parent

    def resolve(p):
        return p if os.path.isabs(p) else base / p

    scans = tuple(SubjectScan(sid, load_matrix(resolve(p))) for sid, p in doc["subjects"].items())
    coords = None
    if doc.get("coords"):
        coords = load_coords(resolve(doc["coords"]), units or doc.get("units", "voxel-index"))
    labels = load_labels(resolve(doc["labels"])) if doc.get("labels") else None
    return Cohort(scans, coords, labels)


def save_manifest(cohort, directory, format="dmat"):
    """Write every scan, the coordinates and labels, plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"subjects": {}}
    for scan in cohort.scans:
        name = f"{scan.subject_id}.{format}"
        save_matrix(scan.data, directory / name, format)
        doc["subjects"][scan.subject_id] = name
    if cohort.coords is not None:
        save_coords(cohort.coords, directory / "coords.csv")
        doc["coords"] = "coords.csv"
        doc["units"] = cohort.coords.units
    if cohort.labels is not None:
        save_labels(cohort.labels, directory / "labels.txt")
        doc["labels"] = "labels.txt"
    out = directory / "manifest.json"
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out
