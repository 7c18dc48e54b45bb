"""Between-subject evaluation by leave-one-subject-out (LOSO) cross-validation.

Two protocols are provided:

* :func:`loso_linear_classify` trains one-versus-one ridge classifiers on the
  aligned training subjects and labels the held-out subject's time points.
* :func:`segment_correlation_classify` fits the alignment on a training time
  range and identifies held-out test segments by their correlation with the
  group-mean segments (1-nearest neighbour).

In both, the held-out subject never touches the reference, the transforms of
the training subjects, or the choice of ``k``. It is mapped onto the trained
reference with one regularized Procrustes solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .align import AlignmentConfig, _polar, opp_solve, preprocess, run_engine, thin_svd
from .data import Cohort, ValidationError
from .prior import LocationMatrix

__all__ = [
    "Alignment",
    "OneVsOneRidge",
    "ClassificationReport",
    "SegmentSpec",
    "fit_alignment",
    "loso_linear_classify",
    "segment_correlation_classify",
    "segment_starts",
    "binomial_band",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Alignment:
    """Which engine to fit inside each fold.

    ``engine="none"`` skips functional alignment. When `k_grid` is given, ``k``
    is chosen per outer fold by nested LOSO on the training subjects.
    """

    engine: str = "promises"
    config: AlignmentConfig = AlignmentConfig()
    prior: Optional[LocationMatrix] = None
    k_grid: Optional[Tuple[float, ...]] = None

    def with_k(self, k):
        return Alignment(self.engine, self.config.replace(k=float(k)), self.prior, None)


class OneVsOneRidge:
    """Ridge-regularized linear classifiers combined one-versus-one by voting.

    Each pair ``(a, b)`` of classes gets a closed-form ridge regression onto
    ``+1`` (class a) and ``-1`` (class b) with an unpenalized intercept.
    Votes are tie-broken by the accumulated decision values.
    """

    def __init__(self, alpha=1.0):
        if alpha <= 0:
            raise ValidationError("ridge penalty must be positive")
        self.alpha = float(alpha)

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        classes, counts = np.unique(y, return_counts=True)
        if len(classes) < 2:
            raise ValidationError("classification needs at least two classes")
        for c, n in zip(classes, counts):
            if n < 2:
                raise ValidationError(f"class {getattr(c, 'item', lambda: c)()!r} has a single sample")
        self.classes_ = classes
        self.pairs_ = list(combinations(range(len(classes)), 2))
        coefs, intercepts = [], []
        for a, b in self.pairs_:
            mask = (y == classes[a]) | (y == classes[b])
            w, w0 = _ridge(x[mask], np.where(y[mask] == classes[a], 1.0, -1.0), self.alpha)
            coefs.append(w)
            intercepts.append(w0)
        self.coef_ = np.array(coefs)
        self.intercept_ = np.array(intercepts)
        return self

    def decision_function(self, x):
        return np.asarray(x, dtype=np.float64) @ self.coef_.T + self.intercept_

    def predict(self, x):
        d = self.decision_function(x)
        n, c = d.shape[0], len(self.classes_)
        votes = np.zeros((n, c))
        conf = np.zeros((n, c))
        for p, (a, b) in enumerate(self.pairs_):
            win_a = d[:, p] > 0
            votes[:, a] += win_a
            votes[:, b] += ~win_a
            conf[:, a] += d[:, p]
            conf[:, b] -= d[:, p]
        score = votes + conf / (3.0 * (np.abs(conf) + 1.0))
        return self.classes_[np.argmax(score, axis=1)]

    @property
    def coefficient_maps(self):
        return {(self.classes_[a].item(), self.classes_[b].item()): self.coef_[p]
                for p, (a, b) in enumerate(self.pairs_)}


def _ridge(x, y, alpha):
    xm = x.mean(axis=0)
    ym = y.mean()
    xc = x - xm
    yc = y - ym
    n, v = xc.shape
    if n >= v:
        w = np.linalg.solve(xc.T @ xc + alpha * np.eye(v), xc.T @ yc)
    else:
        w = xc.T @ np.linalg.solve(xc @ xc.T + alpha * np.eye(n), yc)
    return w, ym - xm @ w


@dataclass
class ClassificationReport:
    mean_accuracy: float
    per_subject_accuracy: List[float]
    subject_ids: List[str]
    n_predictions: List[int]
    chance: float
    coefficient_maps: Optional[Dict[Tuple[int, int], np.ndarray]] = None
    chosen_k: Optional[List[float]] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        out = {
            "mean_accuracy": self.mean_accuracy,
            "per_subject_accuracy": dict(zip(self.subject_ids, self.per_subject_accuracy)),
            "n_predictions": dict(zip(self.subject_ids, self.n_predictions)),
            "chance": self.chance,
            "notes": list(self.notes),
        }
        if self.chosen_k is not None:
            out["chosen_k"] = dict(zip(self.subject_ids, self.chosen_k))
        if self.coefficient_maps is not None:
            out["classifier_pairs"] = [f"{a}-{b}" for a, b in self.coefficient_maps]
        return out


def binomial_band(p, n, n_sigma=3.0):
    """``p +/- n_sigma * sqrt(p (1 - p) / n)``."""
    s = n_sigma * np.sqrt(p * (1.0 - p) / n)
    return p - s, p + s


# ---------------------------------------------------------------------------
# fitting and mapping
# ---------------------------------------------------------------------------

@dataclass
class FittedAlignment:
    """Training-side alignment plus a way to map a new subject onto it."""

    spec: Alignment
    aligned: List[np.ndarray]
    transforms: List[np.ndarray]
    result: object = None

    def map_subject(self, x):
        """Transform (``v x v``) taking the new subject `x` into the trained space."""
        spec = self.spec
        if spec.engine == "none":
            return np.eye(x.shape[1])
        cfg = spec.config
        x = preprocess([x], cfg)[0]
        res = self.result
        k = cfg.k if spec.engine in ("promises", "promises-efficient", "opp") else 0.0
        if res.reduced:
            _, _, q = thin_svd(x)
            a = (x @ q).T @ res.reduced_reference
            if k > 0:
                a = a + k * (q.T @ spec.prior.values @ res.reference_basis)
            r, _ = _polar(a, cfg.rank_tol)
            return q @ r @ q.T
        return opp_solve(x, res.reference, k, spec.prior, rank_tol=cfg.rank_tol).values


def fit_alignment(cohort, spec):
    """Fit `spec` on `cohort` (the training subjects of a fold)."""
    if spec.engine == "none":
        v = cohort.v
        return FittedAlignment(spec, [np.array(a) for a in cohort.arrays], [np.eye(v)] * cohort.m)
    if spec.config.k > 0 and spec.prior is None:
        raise ValidationError(f"engine {spec.engine!r} with k > 0 needs a location matrix")
    res = run_engine(spec.engine, cohort, spec.prior, spec.config)
    return FittedAlignment(spec, res.aligned, [res.full_transform(i) for i in range(cohort.m)], res)


def _choose_k(train, spec, evaluator, **kw):
    from .modelsel import select_k

    rep = select_k(train, spec.k_grid, evaluator=evaluator, alignment=spec, **kw)
    return rep.chosen_k


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def loso_linear_classify(cohort, alignment=None, labels=None, alpha=1.0):
    """Leave-one-subject-out classification of time points.

    For every held-out subject: fit `alignment` on the others, map the held-out
    subject onto the trained reference, train one-versus-one ridge classifiers
    on the aligned training data and score the held-out predictions.
    Coefficient maps are averaged over folds and reported in voxel space.
    """
    alignment = alignment or Alignment()
    labels = np.asarray(cohort.labels if labels is None else labels)
    if labels.shape != (cohort.t,):
        raise ValidationError(f"need one label per time point (t={cohort.t}), got shape {labels.shape}")
    cohort.require_group()
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValidationError("classification needs at least two classes")
    for c, n in zip(classes, counts):
        if n < 2:
            raise ValidationError(f"class {getattr(c, 'item', lambda: c)()!r} has a single sample")
    if alignment.engine != "none" and cohort.m < 3:
        raise ValidationError("aligned LOSO classification needs at least 3 subjects")

    accs, chosen, maps = [], [], {}
    for j in range(cohort.m):
        train = cohort.without(j)
        spec = alignment
        if alignment.k_grid is not None:
            k = _choose_k(train, alignment, "linear", labels=labels, alpha=alpha)
            chosen.append(k)
            spec = alignment.with_k(k)
        fit = fit_alignment(train, spec)
        x_train = np.vstack(fit.aligned)
        y_train = np.tile(labels, train.m)
        clf = OneVsOneRidge(alpha).fit(x_train, y_train)
        x_test = cohort.scans[j].data
        if spec.engine != "none":
            x_test = preprocess([x_test], spec.config)[0] @ fit.map_subject(x_test)
        accs.append(float(np.mean(clf.predict(x_test) == labels)))
        for pair, w in clf.coefficient_maps.items():
            maps[pair] = maps.get(pair, 0.0) + w / cohort.m
    return ClassificationReport(
        mean_accuracy=float(np.mean(accs)),
        per_subject_accuracy=accs,
        subject_ids=cohort.ids,
        n_predictions=[cohort.t] * cohort.m,
        chance=1.0 / len(classes),
        coefficient_maps=maps,
        chosen_k=chosen or None,
    )


@dataclass(frozen=True)
class SegmentSpec:
    segment_length: int = 6
    stride: int = 6

    def __post_init__(self):
        if self.segment_length < 1 or self.stride < 1:
            raise ValidationError("segment_length and stride must be >= 1")


def segment_starts(start, stop, spec):
    """First rows of every full segment inside ``[start, stop)``."""
    return list(range(start, stop - spec.segment_length + 1, spec.stride))


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else float("nan")


def segment_correlation_classify(cohort, spec=None, alignment=None, split=None):
    """Correlation-based 1-NN identification of held-out time segments.

    Parameters
    ----------
    cohort : Cohort
    spec : SegmentSpec
        Segment length and stride in time points.
    alignment : Alignment
        Engine fitted on the training rows of the training subjects.
    split : ((int, int), (int, int)), optional
        Train and test row ranges ``[start, stop)``. Defaults to the first and
        second half of the time series.

    Returns
    -------
    ClassificationReport
        A test segment counts as correct only when its own position has the
        strictly largest correlation with the group mean.
    """
    spec = spec or SegmentSpec()
    alignment = alignment or Alignment()
    cohort.require_group()
    t = cohort.t
    if split is None:
        split = ((0, t // 2), (t // 2, t))
    (tr0, tr1), (te0, te1) = split
    if not (0 <= tr0 < tr1 <= t and 0 <= te0 < te1 <= t):
        raise ValidationError(f"invalid split {split} for t={t}")
    if max(tr0, te0) < min(tr1, te1):
        raise ValidationError("train and test ranges overlap")
    starts = segment_starts(te0, te1, spec)
    if len(starts) < 2:
        raise ValidationError(f"test range {te0}:{te1} holds {len(starts)} segment(s); need at least 2")
    if alignment.engine != "none" and cohort.m < 3:
        raise ValidationError("aligned segment classification needs at least 3 subjects")
    train_rows = np.arange(tr0, tr1)
    test_rows = np.arange(te0, te1)
    L = spec.segment_length

    accs, counts, chosen, notes = [], [], [], []
    for j in range(cohort.m):
        others = cohort.without(j)
        spec_j = alignment
        if alignment.k_grid is not None:
            k = _choose_k(others.time_slice(train_rows), alignment, "segment", segment=spec)
            chosen.append(k)
            spec_j = alignment.with_k(k)
        fit = fit_alignment(others.time_slice(train_rows), spec_j)
        held = cohort.scans[j].data
        r_held = fit.map_subject(held[train_rows])
        test_held = held[test_rows] @ r_held
        group = np.zeros((len(test_rows), cohort.v))
        for x, r in zip(others.arrays, fit.transforms):
            group += x[test_rows] @ r
        group /= others.m
        segs_g = [group[s - te0:s - te0 + L].ravel() for s in starts]
        correct = total = 0
        for p, s in enumerate(starts):
            seg = test_held[s - te0:s - te0 + L].ravel()
            cors = np.array([_pearson(seg, g) for g in segs_g])
            if not np.isfinite(cors[p]):
                notes.append(f"{cohort.ids[j]}: segment at row {s} has zero variance, skipped")
                continue
            rivals = np.delete(cors, p)
            rivals = rivals[np.isfinite(rivals)]
            total += 1
            correct += bool(np.all(cors[p] > rivals))
        for n in notes[-1:]:
            logger.info(n)
        counts.append(total)
        accs.append(correct / total if total else float("nan"))
    return ClassificationReport(
        mean_accuracy=float(np.nanmean(accs)),
        per_subject_accuracy=accs,
        subject_ids=cohort.ids,
        n_predictions=counts,
        chance=1.0 / len(starts),
        chosen_k=chosen or None,
        notes=notes,
    )
