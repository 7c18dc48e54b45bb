"""Procrustes alignment engines.

Every engine aligns subjects by right-multiplication, ``X_i R_i``, with
``R_i`` orthogonal (reflections allowed). The ProMises engines add a matrix
von Mises-Fisher prior with location ``F`` and concentration ``k``; the MAP
update for each subject is the polar factor of ``X_i^T M + k F``. With
``k = 0`` they reduce exactly to generalized Procrustes analysis.

Within a sweep the reference is held fixed, so per-subject solves are
independent and may run on a thread pool. The reference mean is always
accumulated in ascending subject order, which keeps every result bit-identical
regardless of the thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np

from .data import Cohort, ValidationError
from .prior import RANK_TOL, LocationMatrix, project_location_matrix, validate_concentration

__all__ = [
    "AlignmentConfig",
    "OrthogonalTransform",
    "TraceRow",
    "AlignmentResult",
    "thin_svd",
    "opp_solve",
    "opp_align",
    "gpa_align",
    "promises_align",
    "efficient_promises_align",
    "hyperalign",
    "objective",
    "penalized_objective",
    "group_mean",
    "signal_scale",
    "preprocess",
    "ENGINES",
]

logger = logging.getLogger(__name__)

ENGINES = ("opp", "gpa", "hyper", "promises", "promises-efficient")


@dataclass(frozen=True)
class AlignmentConfig:
    """Settings shared by the iterative engines.

    ``tol`` thresholds the relative squared change of the reference,
    ``||M - M_old||_F^2 / ||M_old||_F^2``, between sweeps.
    """

    k: float = 0.0
    max_iter: int = 30
    tol: float = 1e-6
    center_columns: bool = False
    scale_unit_frobenius: bool = False
    reduced: bool = False
    threads: int = 1
    rank_tol: float = RANK_TOL

    def __post_init__(self):
        object.__setattr__(self, "k", validate_concentration(self.k))
        if int(self.max_iter) < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        if int(self.threads) < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class OrthogonalTransform:
    subject_id: str
    values: np.ndarray
    # False when the posterior parameter was rank deficient (solution not unique)
    unique: bool = True


class TraceRow(NamedTuple):
    iteration: int
    objective: float
    reference_delta: float


@dataclass
class AlignmentResult:
    """Output of an alignment run.

    For the reduced (thin-SVD) engine, `transforms` hold the ``t x t``
    rotations of the reduced data, `projections` the per-subject ``v x t``
    bases ``Q_i``, and `aligned` the back-projected ``X_i Q_i R_i Q_i^T``.
    `reference` is always the ``t x v`` mean of `aligned`; the reduced engine
    also keeps its ``t x t`` working reference in `reduced_reference`.
    """

    method: str
    subject_ids: List[str]
    transforms: List[OrthogonalTransform]
    aligned: List[np.ndarray]
    reference: np.ndarray
    trace: List[TraceRow]
    iterations_run: int
    converged: bool
    k: float = 0.0
    unique: bool = False
    notes: List[str] = field(default_factory=list)
    projections: Optional[List[np.ndarray]] = None
    singular_values: Optional[List[np.ndarray]] = None
    left_vectors: Optional[List[np.ndarray]] = None
    reduced_reference: Optional[np.ndarray] = None
    reference_basis: Optional[np.ndarray] = None
    reduced_aligned: Optional[List[np.ndarray]] = None

    @property
    def reduced(self):
        return self.projections is not None

    @property
    def final_objective(self):
        """Objective recorded after the last sweep (penalized when k > 0)."""
        return self.trace[-1].objective

    def index_of(self, subject_id):
        return self.subject_ids.index(subject_id)

    def full_transform(self, i):
        """The ``v x v`` map applied to subject `i` in voxel space."""
        r = self.transforms[i].values
        if self.projections is None:
            return r
        q = self.projections[i]
        return q @ r @ q.T


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------

def _fix_signs(left, right):
    """Flip singular-vector pairs so each left vector's largest-|.| entry is positive."""
    idx = np.argmax(np.abs(left), axis=0)  # first occurrence breaks ties
    signs = np.sign(left[idx, np.arange(left.shape[1])])
    signs[signs == 0] = 1.0
    return left * signs, right * signs


def thin_svd(x):
    """Thin SVD ``X = L diag(S) Q^T`` of a ``t x v`` matrix with ``t <= v``.

    Returns ``L`` (t x t), ``S`` (t,) non-increasing, and ``Q`` (v x t) with
    orthonormal columns. Signs are fixed so that the largest-magnitude entry
    of every column of ``L`` is positive, lowest index on ties.
    """
    x = np.asarray(x, dtype=np.float64)
    t, v = x.shape
    if t > v:
        raise ValidationError(f"thin_svd expects t <= v, got {t} x {v}")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    u, q = _fix_signs(u, vt.T)
    return u, s, q


def _polar(a, rank_tol):
    u, s, vt = np.linalg.svd(a)
    unique = bool(s[-1] > rank_tol * s[0]) if s[0] > 0 else False
    return u @ vt, unique


def _prior_values(f):
    if f is None:
        return None
    return f.values if isinstance(f, LocationMatrix) else np.asarray(f, dtype=np.float64)


def opp_solve(x, m, k=0.0, f=None, subject_id="", rank_tol=RANK_TOL):
    """Solve the (regularized) orthogonal Procrustes problem.

    Returns the orthogonal ``R`` maximizing ``tr((X^T M + k F)^T R)``, which for
    ``k = 0`` minimizes ``||X R - M||_F^2``. A rank-deficient posterior
    parameter still yields a solution, flagged with ``unique=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if x.shape != m.shape:
        raise ValidationError(f"shape mismatch: X {x.shape} vs M {m.shape}")
    k = validate_concentration(k)
    a = x.T @ m
    if k > 0:
        fv = _prior_values(f)
        if fv is None:
            raise ValidationError("k > 0 requires a location matrix F")
        if fv.shape != a.shape:
            raise ValidationError(f"location matrix is {fv.shape}, expected {a.shape}")
        a = a + k * fv
    r, unique = _polar(a, rank_tol)
    return OrthogonalTransform(subject_id, r, unique)


def group_mean(arrays):
    """Elementwise mean, accumulated in list order."""
    acc = np.zeros_like(arrays[0], dtype=np.float64)
    for a in arrays:
        acc += a
    return acc / len(arrays)


def objective(aligned, m):
    """Sum of squared Frobenius distances of the aligned matrices to `m`."""
    return float(sum(np.sum((np.asarray(a) - m) ** 2) for a in aligned))


def penalized_objective(cohort, transforms, m, k, f):
    """``sum_i ||X_i R_i - M||^2 - 2 k tr(F_i^T R_i)``.

    `cohort` may be a :class:`Cohort` or a list of arrays; `transforms` a list
    of arrays or :class:`OrthogonalTransform`. `f` is one location matrix or a
    per-subject list (as in the reduced model).
    """
    arrays = cohort.arrays if isinstance(cohort, Cohort) else list(cohort)
    rs = [getattr(r, "values", r) for r in transforms]
    total = 0.0
    for i, (x, r) in enumerate(zip(arrays, rs)):
        total += float(np.sum((x @ r - m) ** 2))
        if k > 0:
            fi = _prior_values(f[i] if isinstance(f, (list, tuple)) else f)
            total -= 2.0 * k * float(np.sum(fi * r))
    return total


def signal_scale(cohort):
    """Largest ``||X_i^T M_0||_F`` over subjects, with ``M_0`` the unaligned mean.

    Useful for expressing `k` relative to the data term.
    """
    arrays = cohort.arrays if isinstance(cohort, Cohort) else list(cohort)
    m0 = group_mean(arrays)
    return max(float(np.linalg.norm(x.T @ m0)) for x in arrays)


def preprocess(arrays, config):
    out = []
    for x in arrays:
        x = np.array(x, dtype=np.float64)
        if config.center_columns:
            x = x - x.mean(axis=0)
        if config.scale_unit_frobenius:
            n = np.linalg.norm(x)
            if n > 0:
                x = x / n
        out.append(x)
    return out


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

def _alternate(arrays, k, priors, config, m0):
    """Alternating MAP updates shared by GPA and both ProMises variants.

    `priors` is None or a per-subject list of location matrices. Returns
    transforms, uniqueness flags, aligned arrays, reference, trace and
    whether the tolerance was met.
    """
    m_hat = m0
    trace = []
    converged = False
    rs = flags = aligned = None
    for it in range(1, int(config.max_iter) + 1):
        def solve(i, m_hat=m_hat):
            a = arrays[i].T @ m_hat
            if k > 0:
                a = a + k * priors[i]
            return _polar(a, config.rank_tol)

        sols = _pmap(solve, list(range(len(arrays))), int(config.threads))
        rs = [r for r, _ in sols]
        flags = [u for _, u in sols]
        aligned = [x @ r for x, r in zip(arrays, rs)]
        m_old = m_hat
        m_hat = group_mean(aligned)
        delta = _relative_change(m_hat, m_old)
        trace.append(TraceRow(it, penalized_objective(arrays, rs, m_hat, k, priors), delta))
        if delta < config.tol:
            converged = True
            break
    return rs, flags, aligned, m_hat, trace, converged


def _relative_change(new, old):
    denom = float(np.sum(old ** 2))
    delta = float(np.sum((new - old) ** 2))
    return delta / denom if denom > 0 else delta


def _check_initial(initial_reference, shape):
    if initial_reference is None:
        return None
    m0 = np.array(initial_reference, dtype=np.float64)
    if m0.shape != shape:
        raise ValidationError(f"initial reference has shape {m0.shape}, expected {shape}")
    return m0


def promises_align(cohort, f=None, config=None, initial_reference=None, *, _method="promises"):
    """Fit the ProMises model by alternating MAP updates.

    Starting from the mean of the inputs (or `initial_reference`), each sweep
    sets ``R_i = polar(X_i^T M + k F)`` for every subject against the fixed
    reference, then replaces the reference by the mean of the aligned data.
    Iteration stops once the relative squared change of the reference drops
    below ``config.tol`` or after ``config.max_iter`` sweeps.
    """
    config = config or AlignmentConfig()
    if config.reduced and _method == "promises":
        return efficient_promises_align(cohort, f, config, initial_reference)
    cohort.require_group()
    k = config.k
    arrays = preprocess(cohort.arrays, config)
    priors = None
    if k > 0:
        fv = _prior_values(f)
        if fv is None:
            raise ValidationError("k > 0 requires a location matrix F")
        if fv.shape != (cohort.v, cohort.v):
            raise ValidationError(f"location matrix is {fv.shape}, expected {(cohort.v, cohort.v)}")
        priors = [fv] * cohort.m
    m0 = _check_initial(initial_reference, (cohort.t, cohort.v))
    if m0 is None:
        m0 = group_mean(arrays)
    rs, flags, aligned, m_hat, trace, converged = _alternate(arrays, k, priors, config, m0)
    unique = k > 0 and all(flags)
    notes = []
    if not unique:
        notes.append("solution not unique: k = 0 or posterior parameter rank deficient")
    if not converged:
        logger.info("%s: stopped after max_iter=%d sweeps", _method, config.max_iter)
    ids = cohort.ids
    return AlignmentResult(
        method=_method,
        subject_ids=ids,
        transforms=[OrthogonalTransform(s, r, bool(u and k > 0)) for s, r, u in zip(ids, rs, flags)],
        aligned=aligned,
        reference=m_hat,
        trace=trace,
        iterations_run=len(trace),
        converged=converged,
        k=k,
        unique=unique,
        notes=notes,
    )


def gpa_align(cohort, config=None, initial_reference=None):
    """Generalized Procrustes analysis: ProMises with ``k = 0``.

    The solution is only defined up to a common rotation, so the result is
    always marked non-unique.
    """
    config = (config or AlignmentConfig()).replace(k=0.0, reduced=False)
    return promises_align(cohort, None, config, initial_reference, _method="gpa")


def efficient_promises_align(cohort, f=None, config=None, initial_reference=None):
    """ProMises on thin-SVD projections of the data.

    Each ``X_i = L_i S_i Q_i^T``; the engine aligns the ``t x t`` matrices
    ``X_i Q_i`` with reduced location matrices ``Q_i^T F Q_M``, where ``Q_M``
    comes from the thin SVD of the initial reference and stays fixed. The
    aligned data are back-projected as ``X_i Q_i R_i Q_i^T``. When ``t >= v``
    there is nothing to reduce and the full engine runs instead.
    """
    config = (config or AlignmentConfig()).replace(reduced=True)
    cohort.require_group()
    t, v = cohort.t, cohort.v
    if t >= v:
        msg = f"t={t} >= v={v}: no reduction possible, ran the full ProMises engine"
        logger.info(msg)
        res = promises_align(cohort, f, config.replace(reduced=False), initial_reference)
        res.notes.append(msg)
        return res
    k = config.k
    arrays = preprocess(cohort.arrays, config)
    svds = _pmap(thin_svd, arrays, int(config.threads))
    qs = [q for _, _, q in svds]
    reduced = [x @ q for x, q in zip(arrays, qs)]
    m0_full = _check_initial(initial_reference, (t, v))
    if m0_full is None:
        m0_full = group_mean(arrays)
    _, _, q_m = thin_svd(m0_full)
    priors = None
    if k > 0:
        fv = _prior_values(f)
        if fv is None:
            raise ValidationError("k > 0 requires a location matrix F")
        priors = [project_location_matrix(fv, q, q_m) for q in qs]
    m0 = group_mean(reduced) if initial_reference is None else m0_full @ q_m
    rs, flags, aligned_r, m_hat, trace, converged = _alternate(reduced, k, priors, config, m0)
    aligned = [y @ q.T for y, q in zip(aligned_r, qs)]
    unique = k > 0 and all(flags)
    notes = [] if unique else ["solution not unique: k = 0 or posterior parameter rank deficient"]
    ids = cohort.ids
    return AlignmentResult(
        method="promises-efficient",
        subject_ids=ids,
        transforms=[OrthogonalTransform(s, r, bool(u and k > 0)) for s, r, u in zip(ids, rs, flags)],
        aligned=aligned,
        reference=group_mean(aligned),
        trace=trace,
        iterations_run=len(trace),
        converged=converged,
        k=k,
        unique=unique,
        notes=notes,
        projections=qs,
        singular_values=[s for _, s, _ in svds],
        left_vectors=[l for l, _, _ in svds],
        reduced_reference=m_hat,
        reference_basis=q_m,
        reduced_aligned=aligned_r,
    )


def hyperalign(cohort, order=None, config=None):
    """Two-level sequential hyperalignment.

    Level 1 aligns ``order[1]`` to ``order[0]``, then every following subject
    to the running mean of those already aligned. Level 2 re-aligns every
    subject to the level-1 mean. The outcome depends on `order`.
    """
    cohort.require_group()
    config = config or AlignmentConfig()
    arrays = preprocess(cohort.arrays, config)
    m = cohort.m
    order = list(range(m)) if order is None else [int(i) for i in order]
    if sorted(order) != list(range(m)):
        raise ValidationError(f"order must be a permutation of 0..{m - 1}, got {order}")
    first = order[0]
    ref = arrays[first]
    done = [arrays[first]]
    for j in order[1:]:
        r = opp_solve(arrays[j], ref, rank_tol=config.rank_tol).values
        done.append(arrays[j] @ r)
        ref = group_mean(done)
    level1 = ref
    sols = _pmap(lambda x: _polar(x.T @ level1, config.rank_tol)[0], arrays, int(config.threads))
    aligned = [x @ r for x, r in zip(arrays, sols)]
    final = group_mean(aligned)
    trace = [
        TraceRow(1, objective(done, level1), _relative_change(level1, arrays[first])),
        TraceRow(2, objective(aligned, final), _relative_change(final, level1)),
    ]
    ids = cohort.ids
    return AlignmentResult(
        method="hyper",
        subject_ids=ids,
        transforms=[OrthogonalTransform(s, r, False) for s, r in zip(ids, sols)],
        aligned=aligned,
        reference=final,
        trace=trace,
        iterations_run=2,
        converged=True,
        notes=["hyperalignment depends on subject order; solution not unique"],
    )


def opp_align(cohort, f=None, config=None, target=None):
    """Align every subject to one target (default: the first subject) by a single OPP solve."""
    cohort.require_group()
    config = config or AlignmentConfig()
    arrays = preprocess(cohort.arrays, config)
    tgt = arrays[0] if target is None else _check_initial(target, (cohort.t, cohort.v))
    k = config.k
    sols = _pmap(
        lambda x: opp_solve(x, tgt, k, f, rank_tol=config.rank_tol), arrays, int(config.threads)
    )
    ids = cohort.ids
    rs = [s.values for s in sols]
    aligned = [x @ r for x, r in zip(arrays, rs)]
    priors = None if k == 0 else [_prior_values(f)] * len(arrays)
    trace = [TraceRow(1, penalized_objective(arrays, rs, tgt, k, priors), 0.0)]
    return AlignmentResult(
        method="opp",
        subject_ids=ids,
        transforms=[OrthogonalTransform(i, s.values, s.unique) for i, s in zip(ids, sols)],
        aligned=aligned,
        reference=np.array(tgt),
        trace=trace,
        iterations_run=1,
        converged=True,
        k=k,
        unique=all(s.unique for s in sols),
    )


def run_engine(engine, cohort, f=None, config=None, order=None, initial_reference=None):
    """Dispatch by engine name (see :data:`ENGINES`)."""
    config = config or AlignmentConfig()
    if engine == "gpa":
        return gpa_align(cohort, config, initial_reference)
    if engine == "promises":
        return promises_align(cohort, f, config.replace(reduced=False), initial_reference)
    if engine == "promises-efficient":
        return efficient_promises_align(cohort, f, config, initial_reference)
    if engine == "hyper":
        return hyperalign(cohort, order, config)
    if engine == "opp":
        return opp_align(cohort, f, config)
    raise ValidationError(f"unknown engine {engine!r}; expected one of {ENGINES}")
