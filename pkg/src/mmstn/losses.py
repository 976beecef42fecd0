"""Geometric training losses with gradients.

Every loss returns a :class:`LossValue` whose ``grads`` maps the name of
each differentiable input to dL/d(input).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mmstn.errors import InputError
from mmstn.model import MorphableModel
from mmstn.transform import PoseShapeParams

DEFAULT_WEIGHTS = {"landmark": 1.0, "symmetry": 0.1, "multiview": 0.1, "prior": 0.01}


@dataclass
class LandmarkSet:
    points: np.ndarray  # (L, 2) pixels
    confidences: np.ndarray  # (L,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.confidences):
            raise InputError("one confidence per landmark required")
        if np.any(self.confidences < 0):
            raise InputError("landmark confidences must be non-negative")

    def __len__(self):
        return len(self.points)


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


def _sampled(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise InputError(f"{name} must be NxC")
    return v


def _mask(m, n, name):
    m = np.asarray(m)
    if m.shape != (n,):
        raise InputError(f"{name} must have shape ({n},), got {m.shape}")
    return m.astype(np.float64)


def symmetry_loss(sampled, mask, sym_index) -> LossValue:
    """Squared difference between each vertex and its mirror, both visible.

    Summed over all vertices, so each mirror pair is counted twice and
    vertices on the symmetry line contribute nothing.
    """
    V = _sampled(sampled, "sampled")
    n = V.shape[0]
    M = _mask(mask, n, "mask")
    sym = np.asarray(sym_index)
    if sym.shape != (n,):
        raise InputError("sym_index length must match the sampled image")
    both = M * M[sym]
    diff = V - V[sym]
    value = float(np.sum(both[:, None] * diff**2))
    return LossValue(value, {"sampled": 4.0 * both[:, None] * diff})


def multiview_loss(sampled_a, mask_a, sampled_b, mask_b) -> LossValue:
    A = _sampled(sampled_a, "sampled_a")
    B = _sampled(sampled_b, "sampled_b")
    if A.shape != B.shape:
        raise InputError(f"sampled images differ in shape: {A.shape} vs {B.shape}")
    both = _mask(mask_a, A.shape[0], "mask_a") * _mask(mask_b, A.shape[0], "mask_b")
    diff = A - B
    value = float(np.sum(both[:, None] * diff**2))
    g = 2.0 * both[:, None] * diff
    return LossValue(value, {"sampled_a": g, "sampled_b": -g})


def reflection_signs(symmetry_sign) -> np.ndarray:
    """Per-entry signs of the (linear) map theta -> reflect(theta), ignoring t_x's offset."""
    signs = np.ones(6 + len(symmetry_sign))
    signs[[1, 2, 3]] = -1.0
    signs[6:] = np.where(np.asarray(symmetry_sign) < 0, -1.0, 1.0)
    return signs


def reflect_params(theta: PoseShapeParams, image_width: int, symmetry_sign=None) -> PoseShapeParams:
    """Parameters of the mirrored scene under a horizontal image flip.

    r -> (r1, -r2, -r3), t -> (W + 1 - t_x, t_y); antisymmetric shape modes
    change sign.
    """
    signs = np.ones(len(theta.alpha)) if symmetry_sign is None else np.where(np.asarray(symmetry_sign) < 0, -1.0, 1.0)
    return PoseShapeParams(
        r=theta.r * np.array([1.0, -1.0, -1.0]),
        t=np.array([image_width + 1 - theta.t[0], theta.t[1]]),
        log_scale=theta.log_scale,
        alpha=theta.alpha * signs,
    )


def landmark_loss(grid, model: MorphableModel, landmarks: LandmarkSet, selected: bool = False) -> LossValue:
    """Confidence-weighted squared distance of selected grid points to landmarks.

    ``grid`` is the full 2xN sample grid, or the 2xL landmark columns when
    ``selected`` is true. The gradient has the same shape as ``grid``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    L = model.num_landmarks
    if len(landmarks) != L:
        raise InputError(f"model has {L} landmarks, got {len(landmarks)}")
    if selected:
        if grid.shape != (2, L):
            raise InputError(f"selected grid must be (2, {L}), got {grid.shape}")
        pred = grid
    else:
        if grid.shape != (2, model.num_vertices):
            raise InputError("grid must be 2xN")
        pred = grid[:, model.landmark_indices]
    c = landmarks.confidences
    diff = pred - landmarks.points.T
    value = float(np.sum(c * np.sum(diff**2, axis=0)))
    g_sel = 2.0 * c * diff
    if selected:
        return LossValue(value, {"grid": g_sel})
    g = np.zeros_like(grid)
    g[:, model.landmark_indices] = g_sel
    return LossValue(value, {"grid": g})


def prior_loss(alpha) -> LossValue:
    alpha = np.asarray(alpha, dtype=np.float64)
    return LossValue(float(alpha @ alpha), {"alpha": 2.0 * alpha})


def total_loss(components) -> LossValue:
    """Weighted sum of ``(LossValue, weight)`` pairs; gradients combine linearly."""
    value = 0.0
    grads = {}
    for loss, weight in components:
        if weight < 0:
            raise InputError(f"loss weight must be non-negative, got {weight}")
        value += weight * loss.value
        for key, g in loss.grads.items():
            grads[key] = grads[key] + weight * g if key in grads else weight * np.asarray(g, dtype=np.float64)
    return LossValue(value, grads)
