"""Synthetic cohorts with known ground truth.

Subjects follow ``X_i = M R_i^T + E_i``: a shared reference, a per-subject
orthogonal nuisance transform and iid Gaussian noise. Voxels sit on a regular
grid so that location priors can be built from their coordinates.

All randomness derives from one integer seed. Component streams are spawned
with :class:`numpy.random.SeedSequence` keyed on ``(seed, *key)``; see
:func:`derive_rng`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .align import OrthogonalTransform
from .data import Cohort, SubjectScan, ValidationError, VoxelCoordinates

__all__ = [
    "derive_rng",
    "haar_orthogonal",
    "blend_rotation",
    "grid_coords",
    "SynthSpec",
    "SynthCohort",
    "synth_cohort",
]

# stream keys for derive_rng
_REFERENCE, _ROTATION, _NOISE, _LABELS = 0, 1, 2, 3


def derive_rng(seed, *key):
    """Independent generator for component `key` of master `seed`."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def haar_orthogonal(v, seed=None, rng=None):
    """Haar-distributed ``v x v`` orthogonal matrix.

    QR of a standard Gaussian matrix, with the columns of Q rescaled by the
    signs of R's diagonal (Mezzadri's correction).
    """
    if v < 1:
        raise ValidationError(f"v must be >= 1, got {v}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    z = rng.standard_normal((v, v))
    q, r = np.linalg.qr(z)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def blend_rotation(g, alpha):
    """``polar(alpha * G + (1 - alpha) * I)``; exactly the identity at ``alpha = 0``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"rotation_locality must be in [0, 1], got {alpha}")
    v = g.shape[0]
    if alpha == 0.0:
        return np.eye(v)
    if alpha == 1.0:
        return np.array(g)
    u, _, vt = np.linalg.svd(alpha * g + (1.0 - alpha) * np.eye(v))
    return u @ vt


def grid_coords(dims):
    """Lattice points of an ``nx x ny x nz`` grid in lexicographic order."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"grid dims must be three positive integers, got {dims}")
    pts = np.array(list(itertools.product(*(range(d) for d in dims))), dtype=np.float64)
    return VoxelCoordinates(pts, "voxel-index")


@dataclass(frozen=True)
class SynthSpec:
    m: int
    t: int
    v: int
    noise_sigma: float = 1.0
    grid_dims: Optional[Tuple[int, int, int]] = None
    n_classes: Optional[int] = None
    rotation_locality: float = 1.0
    class_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 2 or self.t < 1 or self.v < 1:
            raise ValidationError(f"need m >= 2 and positive t, v; got m={self.m} t={self.t} v={self.v}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        dims = tuple(self.grid_dims) if self.grid_dims is not None else (self.v, 1, 1)
        if int(np.prod(dims)) != self.v:
            raise ValidationError(f"grid dims {dims} do not multiply to v={self.v}")
        object.__setattr__(self, "grid_dims", dims)
        if self.n_classes is not None and not 2 <= self.n_classes <= min(self.t, self.v):
            raise ValidationError(f"n_classes must be in [2, min(t, v)], got {self.n_classes}")
        if not 0.0 <= self.rotation_locality <= 1.0:
            raise ValidationError("rotation_locality must be in [0, 1]")


@dataclass(frozen=True)
class SynthCohort:
    cohort: Cohort
    true_reference: np.ndarray
    true_transforms: List[OrthogonalTransform]
    noise: List[np.ndarray]
    labels: Optional[np.ndarray] = None


def _class_patterns(n_classes, v, strength):
    # block-constant: class c lights up the c-th contiguous block of voxels
    patterns = np.zeros((n_classes, v))
    for c, block in enumerate(np.array_split(np.arange(v), n_classes)):
        patterns[c, block] = strength
    return patterns


def synth_cohort(spec):
    """Draw a cohort following ``X_i = M R_i^T + E_i``.

    ``M`` has iid standard Gaussian entries; with `n_classes` set, every time
    point also gets a class label and the block pattern of its class is added
    to its row of ``M``. ``R_i`` is a Haar draw blended toward the identity by
    `rotation_locality`.
    """
    rng_m = derive_rng(spec.seed, _REFERENCE)
    ref = rng_m.standard_normal((spec.t, spec.v))
    labels = None
    if spec.n_classes is not None:
        rng_l = derive_rng(spec.seed, _LABELS)
        labels = rng_l.permutation(np.resize(np.arange(spec.n_classes), spec.t))
        ref = ref + _class_patterns(spec.n_classes, spec.v, spec.class_strength)[labels]
    ids = [f"sub-{i + 1:02d}" for i in range(spec.m)]
    scans, transforms, noise = [], [], []
    for i, sid in enumerate(ids):
        g = haar_orthogonal(spec.v, rng=derive_rng(spec.seed, _ROTATION, i))
        r = blend_rotation(g, spec.rotation_locality)
        e = spec.noise_sigma * derive_rng(spec.seed, _NOISE, i).standard_normal((spec.t, spec.v))
        scans.append(SubjectScan(sid, ref @ r.T + e))
        transforms.append(OrthogonalTransform(sid, r))
        noise.append(e)
    coords = grid_coords(spec.grid_dims)
    cohort = Cohort(tuple(scans), coords, labels)
    return SynthCohort(cohort, ref, transforms, noise, labels)
