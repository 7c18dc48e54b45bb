"""Uniqueness, sensitivity and locality diagnostics.

* :func:`order_sensitivity` reruns an engine under shuffled subject orders.
* :func:`reference_rotation_sensitivity` restarts GPA (or ProMises) from
  Haar-rotated initial references.
* :func:`loading_locality` summarizes how transform loadings decay with the
  spatial distance between source and target voxels.

Trial ``i`` of a run with master seed ``s`` draws from
``derive_rng(s, i)``, so trials are reproducible individually.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .align import AlignmentConfig, group_mean, preprocess, run_engine
from .data import Cohort, ValidationError, VoxelCoordinates
from .evaluation import Alignment, loso_linear_classify
from .prior import pairwise_distances
from .simulate import derive_rng, haar_orthogonal

__all__ = [
    "SensitivityReport",
    "LocalityReport",
    "order_sensitivity",
    "reference_rotation_sensitivity",
    "loading_locality",
]

METRICS = ("output-distance", "reference-distance", "accuracy")
_METHOD_ENGINE = {"hyperalignment": "hyper", "hyper": "hyper", "gpa": "gpa", "promises": "promises",
                  "promises-efficient": "promises-efficient"}


@dataclass
class SensitivityReport:
    method: str
    metric: str
    n_trials: int
    per_trial_metric: List[float]
    variance: float
    objectives: Optional[List[float]] = None
    orders: Optional[List[List[int]]] = None

    def to_dict(self):
        out = {
            "method": self.method,
            "metric": self.metric,
            "n_trials": self.n_trials,
            "per_trial_metric": list(self.per_trial_metric),
            "variance": self.variance,
        }
        if self.objectives is not None:
            out["objectives"] = list(self.objectives)
        if self.orders is not None:
            out["orders"] = [list(o) for o in self.orders]
        return out

    def rows(self):
        """CSV-ready rows: trial, metric[, objective]."""
        for i, x in enumerate(self.per_trial_metric):
            row = {"trial": i, "metric": x}
            if self.objectives is not None:
                row["objective"] = self.objectives[i]
            yield row


def _variance(xs):
    return float(np.var(np.asarray(xs, dtype=np.float64)))


def _output_distance(res, base):
    """Frobenius distance of aligned outputs, matched by subject id."""
    total = 0.0
    for sid, a in zip(res.subject_ids, res.aligned):
        b = base.aligned[base.index_of(sid)]
        total += float(np.sum((a - b) ** 2))
    return float(np.sqrt(total))


def order_sensitivity(cohort, n_perm=20, method="hyperalignment", metric="output-distance", seed=0,
                      prior=None, config=None, labels=None, alpha=1.0):
    """Rerun `method` under `n_perm` random subject orders.

    Trial 0 keeps the cohort order. The metric is the distance of the aligned
    outputs (or the final reference) to trial 0, or the LOSO accuracy when
    ``metric="accuracy"`` (needs labels).
    """
    if n_perm < 2:
        raise ValidationError("n_perm must be >= 2")
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}; expected one of {METRICS}")
    engine = _METHOD_ENGINE.get(method)
    if engine is None:
        raise ValidationError(f"unknown method {method!r}")
    config = config or AlignmentConfig()
    orders = [list(range(cohort.m))]
    for i in range(1, n_perm):
        orders.append([int(j) for j in derive_rng(seed, i).permutation(cohort.m)])

    values, base = [], None
    for order in orders:
        shuffled = cohort.subset(order)
        if metric == "accuracy":
            rep = loso_linear_classify(shuffled, Alignment(engine, config, prior), labels=labels, alpha=alpha)
            values.append(rep.mean_accuracy)
            continue
        res = run_engine(engine, shuffled, prior, config)
        if base is None:
            base = res
        if metric == "output-distance":
            values.append(_output_distance(res, base))
        else:
            values.append(float(np.linalg.norm(res.reference - base.reference)))
    return SensitivityReport(method, metric, n_perm, values, _variance(values), orders=orders)


def reference_rotation_sensitivity(cohort, n_rot=10, seed=0, method="gpa", prior=None, config=None):
    """Restart `method` from ``M_0 G`` for Haar-random ``G`` (trial 0: ``G = I``).

    Records the output distance to trial 0 and each trial's final objective.
    For GPA the objectives agree while the outputs differ.
    """
    if n_rot < 2:
        raise ValidationError("n_rot must be >= 2")
    engine = _METHOD_ENGINE.get(method)
    if engine not in ("gpa", "promises", "promises-efficient"):
        raise ValidationError(f"reference rotation needs an iterative engine, got {method!r}")
    config = config or AlignmentConfig()
    m0 = group_mean(preprocess(cohort.arrays, config))
    values, objectives, base = [], [], None
    for i in range(n_rot):
        g = np.eye(cohort.v) if i == 0 else haar_orthogonal(cohort.v, rng=derive_rng(seed, i))
        res = run_engine(engine, cohort, prior, config, initial_reference=m0 @ g)
        if base is None:
            base = res
        values.append(_output_distance(res, base))
        objectives.append(res.final_objective)
    return SensitivityReport(method, "output-distance", n_rot, values, _variance(values), objectives=objectives)


@dataclass
class LocalityReport:
    """Loading magnitudes grouped by source-target distance.

    `distances` are the distinct source-target distances seen; the median
    cumulative share of squared loadings at each is in `median_cumulative`.
    Bins are ``[edge_i, edge_{i+1})`` over `bin_edges`.
    """

    bin_edges: np.ndarray
    quartiles: np.ndarray  # (n_bins, 3): 25th, 50th, 75th percentile of |loading|
    bin_counts: np.ndarray
    distances: np.ndarray
    median_cumulative: np.ndarray
    voxels: np.ndarray = field(default=None)

    def cumulative_sq_loading(self, d):
        """Median cumulative proportion of squared loadings within distance `d`."""
        idx = np.searchsorted(self.distances, d + 1e-9, side="right") - 1
        return 0.0 if idx < 0 else float(self.median_cumulative[idx])

    def distance_at(self, proportion):
        """Smallest distance where the median cumulative proportion reaches `proportion`."""
        hit = np.nonzero(self.median_cumulative >= proportion - 1e-12)[0]
        return float(self.distances[hit[0]]) if hit.size else float("inf")

    def to_dict(self):
        return {
            "distance_at_50": self.distance_at(0.5),
            "distance_at_90": self.distance_at(0.9),
            "voxels": [int(v) for v in self.voxels],
        }

    def bin_rows(self):
        for i in range(len(self.bin_counts)):
            q = self.quartiles[i]
            yield {"bin_lo": self.bin_edges[i], "bin_hi": self.bin_edges[i + 1], "count": int(self.bin_counts[i]),
                   "q25": q[0], "median": q[1], "q75": q[2]}

    def cumulative_rows(self):
        for d, c in zip(self.distances, self.median_cumulative):
            yield {"distance": d, "median_cumulative": c}


def loading_locality(result, coords, bins=None, voxel_sample=50, seed=0):
    """Distance profile of the loadings of every subject's voxel-space transform.

    For each sampled target voxel ``j`` and subject, the loadings are the
    column ``R[:, j]`` of the transform (``Q_i R_i Q_i^T`` for the reduced
    engine), paired with the distance from each source voxel to ``j``.

    Parameters
    ----------
    bins : array_like, optional
        Bin edges; default unit-width bins from 0 past the largest distance.
    voxel_sample : int
        Number of target voxels drawn without replacement (all if larger than v).
    """
    if coords is None:
        raise ValidationError("loading locality needs voxel coordinates")
    d = pairwise_distances(coords)
    v = d.shape[0]
    n_subj = len(result.transforms)
    if n_subj == 0 or result.full_transform(0).shape != (v, v):
        raise ValidationError("result transforms do not match the coordinates")
    rng = derive_rng(seed, 0)
    voxels = np.sort(rng.choice(v, size=min(int(voxel_sample), v), replace=False))
    dmax = float(d.max())
    edges = np.arange(0.0, np.floor(dmax) + 2.0) if bins is None else np.asarray(bins, dtype=float)

    dist_key = np.round(d, 9)
    distances = np.unique(dist_key[:, voxels])
    curves = []
    mags, dists = [], []
    for i in range(n_subj):
        r = result.full_transform(i)
        for j in voxels:
            col = r[:, j]
            dj = dist_key[:, j]
            sq = col ** 2
            total = sq.sum()
            mass = np.array([sq[dj <= x].sum() for x in distances])
            curves.append(mass / total if total > 0 else np.zeros_like(mass))
            mags.append(np.abs(col))
            dists.append(d[:, j])
    mags = np.concatenate(mags)
    dists = np.concatenate(dists)
    which = np.digitize(dists, edges) - 1
    nb = len(edges) - 1
    quart = np.full((nb, 3), np.nan)
    counts = np.zeros(nb, dtype=int)
    for b in range(nb):
        sel = mags[which == b]
        counts[b] = sel.size
        if sel.size:
            quart[b] = np.percentile(sel, [25, 50, 75])
    med = np.median(np.array(curves), axis=0)
    # guard against round-off pushing the last value a hair under 1
    med = np.maximum.accumulate(np.minimum(med, 1.0))
    return LocalityReport(edges, quart, counts, distances, med, voxels)
