"""Procrustes-based functional alignment with a von Mises-Fisher prior (ProMises)."""

__version__ = "0.1.0"

from .align import (
    AlignmentConfig,
    AlignmentResult,
    OrthogonalTransform,
    efficient_promises_align,
    gpa_align,
    hyperalign,
    objective,
    opp_solve,
    penalized_objective,
    promises_align,
    thin_svd,
)
from .data import Cohort, SubjectScan, ValidationError, VoxelCoordinates, load_matrix, save_matrix
from .prior import LocationMatrix, build_location_matrix

__all__ = [
    "AlignmentConfig",
    "AlignmentResult",
    "Cohort",
    "LocationMatrix",
    "OrthogonalTransform",
    "SubjectScan",
    "ValidationError",
    "VoxelCoordinates",
    "build_location_matrix",
    "efficient_promises_align",
    "gpa_align",
    "hyperalign",
    "load_matrix",
    "objective",
    "opp_solve",
    "penalized_objective",
    "promises_align",
    "save_matrix",
    "thin_svd",
]
