"""Cross-validated choice of the concentration parameter ``k``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .data import PromisesError, ValidationError
from .evaluation import Alignment, SegmentSpec, loso_linear_classify, segment_correlation_classify

__all__ = ["DEFAULT_GRID", "SelectionReport", "SelectionError", "parse_grid", "select_k"]

DEFAULT_GRID = tuple(float(k) for k in range(1, 101))
EVALUATORS = ("linear", "segment")


class SelectionError(PromisesError):
    """An evaluator failed for one candidate ``k``."""


@dataclass
class SelectionReport:
    chosen_k: float
    # (k, mean accuracy, per-fold accuracies), sorted by k
    per_k_scores: List[Tuple[float, float, List[float]]]

    def to_dict(self):
        return {
            "chosen_k": self.chosen_k,
            "per_k_scores": [
                {"k": k, "mean_accuracy": m, "fold_accuracies": list(f)} for k, m, f in self.per_k_scores
            ],
        }


def parse_grid(text):
    """Parse ``"1:100"`` (inclusive integer range), ``"a:b:step"`` or ``"0.01,1,100"``."""
    text = str(text).strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        lo, hi = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1.0
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        grid = [lo + i * step for i in range(n)]
    else:
        grid = [float(p) for p in text.split(",") if p.strip()]
    return _check_grid(grid)


def _check_grid(grid):
    grid = tuple(float(k) for k in grid)
    if not grid:
        raise ValidationError("k grid is empty")
    if any(k < 0 or not np.isfinite(k) for k in grid):
        raise ValidationError("k grid values must be finite and nonnegative")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("k grid must be strictly increasing")
    return grid


def select_k(cohort, grid=DEFAULT_GRID, evaluator="linear", alignment=None, labels=None,
             alpha=1.0, segment=None, split=None):
    """Pick ``k`` from `grid` by leave-one-subject-out evaluation on `cohort`.

    `cohort` must only contain training data; every candidate is scored by
    running the evaluator's LOSO folds over its subjects. The highest mean
    accuracy wins, ties going to the smaller ``k``.

    Parameters
    ----------
    evaluator : {"linear", "segment"}
        ``linear`` runs :func:`loso_linear_classify` (needs labels);
        ``segment`` runs :func:`segment_correlation_classify` on `split`
        (default: halves of the time range given).
    alignment : Alignment
        Engine, base config and location matrix; its ``k`` is overridden.
    """
    grid = _check_grid(grid)
    if evaluator not in EVALUATORS:
        raise ValidationError(f"unknown evaluator {evaluator!r}; expected one of {EVALUATORS}")
    alignment = alignment or Alignment()
    scores = []
    for k in grid:
        spec = alignment.with_k(k)
        try:
            if evaluator == "linear":
                rep = loso_linear_classify(cohort, spec, labels=labels, alpha=alpha)
            else:
                rep = segment_correlation_classify(cohort, segment or SegmentSpec(), spec, split)
        except ValidationError:
            raise
        except Exception as exc:
            raise SelectionError(f"evaluator {evaluator!r} failed at k={k}: {exc}") from exc
        scores.append((k, rep.mean_accuracy, list(rep.per_subject_accuracy)))
    best_k, best = grid[0], -np.inf
    for k, mean, _ in scores:
        if mean > best:
            best_k, best = k, mean
    return SelectionReport(best_k, scores)
