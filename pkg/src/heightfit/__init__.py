"""Normals and curvatures of triangulated surfaces by local height-function fitting."""
from .diffgeo import (
    FrameDegenerateError,
    curvature_tensor,
    mean_gaussian,
    normal_from_gradient,
    principal,
    symmetric_shape_operator,
    transfer_frame,
)
from .fitting import FitConfig, FitFailedError, FitResult, fit_height, iterative_fit
from .harness import Estimates, EstimationError, VertexDiff, error_norms, estimate_all
from .mesh import Mesh, MeshError, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "MeshError",
    "load_mesh",
    "save_mesh",
    "FitConfig",
    "FitResult",
    "FitFailedError",
    "fit_height",
    "iterative_fit",
    "estimate_all",
    "error_norms",
    "Estimates",
    "EstimationError",
    "VertexDiff",
    "FrameDegenerateError",
    "normal_from_gradient",
    "symmetric_shape_operator",
    "principal",
    "curvature_tensor",
    "mean_gaussian",
    "transfer_frame",
]
