"""Differentiable 3D morphable model spatial transformer layers.

The pipeline maps pose and shape parameters to per-vertex sample points
(``transform``), resamples a source image onto a flattened output grid
(``sampler``) and scores the result with geometric losses (``losses``).
``flatten`` builds the output grid from a mesh, ``fit`` drives the stack.
"""

from mmstn.errors import InputError, NumericalError, SolverError
from mmstn.model import (
    MorphableModel,
    load_model,
    make_synthetic_model,
    save_model,
    shape_backward,
    synthesize_shape,
    whiten_basis,
)
from mmstn.transform import PoseShapeParams, axis_angle_to_matrix, grid_generate

__all__ = [
    "InputError",
    "MorphableModel",
    "NumericalError",
    "PoseShapeParams",
    "SolverError",
    "axis_angle_to_matrix",
    "grid_generate",
    "load_model",
    "make_synthetic_model",
    "save_model",
    "shape_backward",
    "synthesize_shape",
    "whiten_basis",
]
