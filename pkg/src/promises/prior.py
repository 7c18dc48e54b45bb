"""Location matrix of the matrix von Mises-Fisher prior.

The location matrix ``F`` weights how strongly each voxel may contribute to
each aligned voxel. The Euclidean-similarity construction uses
``F_ij = exp(-d_ij)`` so that nearby voxels mix freely and distant voxels are
penalized. The normalizing constant of the prior is never needed since only
the posterior mode is estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import ValidationError, VoxelCoordinates, as_matrix

__all__ = [
    "RANK_TOL",
    "RankDeficiencyError",
    "LocationMatrix",
    "pairwise_distances",
    "build_location_matrix",
    "check_full_rank",
    "project_location_matrix",
    "validate_concentration",
]

RANK_TOL = 1e-10
SYMMETRY_TOL = 1e-12
KINDS = ("euclidean-similarity", "identity", "custom")


class RankDeficiencyError(ValidationError):
    """The location matrix is numerically singular."""


@dataclass(frozen=True)
class LocationMatrix:
    values: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown location matrix kind {self.kind!r}")
        a = as_matrix(self.values, "location matrix")
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    @property
    def v(self):
        return self.values.shape[0]

    @classmethod
    def identity(cls, v):
        return cls(np.eye(v), "identity")

    @classmethod
    def custom(cls, values, tol=RANK_TOL):
        """Validate a user-supplied matrix (square, symmetric, full rank)."""
        a = as_matrix(values, "location matrix")
        if a.shape[0] != a.shape[1]:
            raise ValidationError(f"location matrix must be square, got {a.shape}")
        asym = np.max(np.abs(a - a.T))
        if asym > SYMMETRY_TOL:
            raise ValidationError(f"location matrix is not symmetric (max |F - F^T| = {asym:.3g})")
        if not check_full_rank(a, tol):
            raise RankDeficiencyError("location matrix is rank deficient")
        return cls(a, "custom")


def validate_concentration(k):
    k = float(k)
    if not np.isfinite(k) or k < 0:
        raise ValidationError(f"concentration k must be a finite nonnegative number, got {k}")
    return k


def _coords_array(coords):
    if isinstance(coords, VoxelCoordinates):
        return coords.entries
    return VoxelCoordinates(coords).entries


def pairwise_distances(coords):
    """Euclidean distance between every pair of voxels, shape ``(v, v)``."""
    xyz = _coords_array(coords)
    d = cdist(xyz, xyz)
    np.fill_diagonal(d, 0.0)
    return d


def build_location_matrix(coords=None, kind="euclidean-similarity", *, v=None, tol=RANK_TOL):
    """Build the prior location matrix.

    Parameters
    ----------
    coords : VoxelCoordinates or array_like (v, 3), optional
        Voxel coordinates, required for ``kind="euclidean-similarity"``.
    kind : {"euclidean-similarity", "identity"}
        ``identity`` only needs the voxel count (from `coords` or `v`).
    tol : float
        Relative rank tolerance for the full-rank check.

    Raises
    ------
    RankDeficiencyError
        If two voxels share a location, or the resulting matrix is singular.
    """
    if kind == "identity":
        n = v if v is not None else len(_coords_array(coords))
        return LocationMatrix.identity(int(n))
    if kind != "euclidean-similarity":
        raise ValidationError(f"cannot build a location matrix of kind {kind!r}; use LocationMatrix.custom")
    if coords is None:
        raise ValidationError("euclidean-similarity prior requires voxel coordinates")
    d = pairwise_distances(coords)
    off = d + np.diag(np.full(d.shape[0], np.inf))
    if d.shape[0] > 1 and off.min() == 0.0:
        i, j = np.argwhere(off == 0.0)[0]
        raise RankDeficiencyError(f"voxels {i} and {j} share a location; location matrix would be singular")
    f = np.exp(-d)
    if not check_full_rank(f, tol):
        raise RankDeficiencyError("euclidean-similarity location matrix is numerically rank deficient")
    return LocationMatrix(f, "euclidean-similarity")


def check_full_rank(f, tol=RANK_TOL):
    """True iff the smallest singular value exceeds ``tol`` times the largest."""
    a = np.asarray(f, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"rank check needs a square matrix, got shape {a.shape}")
    s = np.linalg.svd(a, compute_uv=False)
    return bool(s[-1] > tol * s[0])


def project_location_matrix(f, q_i, q_m, orth_tol=1e-10):
    """Reduced location matrix ``Q_i^T F Q_M`` for the thin-SVD model.

    Both projections are ``v x t`` with orthonormal columns.
    """
    fv = f.values if isinstance(f, LocationMatrix) else np.asarray(f, dtype=np.float64)
    q_i = np.asarray(q_i, dtype=np.float64)
    q_m = np.asarray(q_m, dtype=np.float64)
    v = fv.shape[0]
    if fv.shape != (v, v) or q_i.shape[0] != v or q_m.shape[0] != v or q_i.shape[1] != q_m.shape[1]:
        raise ValidationError(
            f"dimension mismatch: F {fv.shape}, Q_i {q_i.shape}, Q_M {q_m.shape}"
        )
    t = q_i.shape[1]
    for name, q in (("Q_i", q_i), ("Q_M", q_m)):
        if np.max(np.abs(q.T @ q - np.eye(t))) > orth_tol:
            raise ValidationError(f"{name} does not have orthonormal columns")
    return q_i.T @ fv @ q_m
