"""Photoacoustic tomography with truncated SVD and projected (null-space) networks."""

from .forward import Measurement, SystemMatrix, assemble_system_matrix, forward_apply
from .geometry import (DESK_GEOMETRY, DESK_GRID, FULL_GEOMETRY, FULL_GRID, BasisGrid,
                       KaiserBesselParams, MeasurementGeometry)
from .svd import (SvdFactors, TruncationPolicy, complement_project, optimal_tsvd,
                  pseudo_inverse_apply, select_alpha, svd_factorize, tsvd_apply)

__version__ = "0.1.0"

__all__ = [
    "BasisGrid", "DESK_GEOMETRY", "DESK_GRID", "KaiserBesselParams", "Measurement",
    "MeasurementGeometry", "FULL_GEOMETRY", "FULL_GRID", "SvdFactors", "SystemMatrix",
    "TruncationPolicy", "assemble_system_matrix", "complement_project", "forward_apply",
    "optimal_tsvd", "pseudo_inverse_apply", "select_alpha", "svd_factorize", "tsvd_apply",
]
