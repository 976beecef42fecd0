"""Grid generator: shape synthesis, rotation, projection, scale, translation.

Every layer has a forward function and a backward function that contracts
an upstream gradient. Points are stored column-wise (3xN or 2xN). The camera
is orthographic along z with the viewer at z = +inf, so larger z is nearer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmstn.errors import InputError
from mmstn.model import MorphableModel, shape_backward, synthesize_shape

# below this angle the Jacobian uses its r = 0 limit
JACOBIAN_ZERO_THRESHOLD = 1e-12
_SERIES_THRESHOLD = 1e-2


@dataclass
class PoseShapeParams:
    """theta = (r, t, logs, alpha) with r axis-angle in radians, t in pixels."""

    r: np.ndarray
    t: np.ndarray
    log_scale: float
    alpha: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(2)
        self.log_scale = float(self.log_scale)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)

    @classmethod
    def zeros(cls, num_modes: int) -> PoseShapeParams:
        return cls(np.zeros(3), np.zeros(2), 0.0, np.zeros(num_modes))

    @classmethod
    def from_vector(cls, vec) -> PoseShapeParams:
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0:3], vec[3:5], vec[5], vec[6:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.t, [self.log_scale], self.alpha])

    def copy(self) -> PoseShapeParams:
        return PoseShapeParams.from_vector(self.to_vector())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


def cross_matrix(a) -> np.ndarray:
    a1, a2, a3 = a
    return np.array([[0.0, -a3, a2], [a3, 0.0, -a1], [-a2, a1, 0.0]])


def axis_angle_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    a, b, _ = _rodrigues_coefficients(float(np.sqrt(r @ r)))
    # I + a [r]x + b (r r^T - |r|^2 I), entry by entry
    x, y, z = (float(v) for v in r)
    return np.array(
        [
            [1 - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z],
            [a * z + b * y * x, 1 - b * (x * x + z * z), -a * x + b * y * z],
            [-a * y + b * z * x, a * x + b * z * y, 1 - b * (x * x + y * y)],
        ]
    )


def _rodrigues_coefficients(angle):
    """sin(x)/x, (1-cos x)/x^2 and (x - sin x)/x^3, by series near zero."""
    if angle < _SERIES_THRESHOLD:
        t2 = angle * angle
        a = 1 - t2 / 6 * (1 - t2 / 20)
        b = 0.5 - t2 / 24 * (1 - t2 / 30)
        c = 1 / 6 - t2 / 120 * (1 - t2 / 42)
        return a, b, c
    s, co = np.sin(angle), np.cos(angle)
    return s / angle, (1 - co) / angle**2, (angle - s) / angle**3


def axis_angle_jacobian(r, R=None) -> np.ndarray:
    """Return dR/dr_i stacked as a (3, 3, 3) array indexed [i, row, col].

    At r = 0 the result is exactly [e_i]x. Elsewhere the closed form
    (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2 is evaluated after expanding
    I - R in powers of [r]x, which cancels the 1/|r|^2 analytically:
    dR/dr_i = (c r_i [r]x + a [e_i]x + b [r x e_i]x) R.
    """
    r = np.asarray(r, dtype=np.float64)
    angle = np.sqrt(r @ r)
    eye = np.eye(3)
    if angle < JACOBIAN_ZERO_THRESHOLD:
        return np.stack([cross_matrix(e) for e in eye])
    if R is None:
        R = axis_angle_to_matrix(r)
    a, b, c = _rodrigues_coefficients(angle)
    rx = cross_matrix(r)
    # r x e_i is column i of [r]x
    return np.stack([(c * r[i] * rx + a * _UNIT_CROSS[i] + b * cross_matrix(rx[:, i])) @ R for i in range(3)])


_UNIT_CROSS = np.stack([cross_matrix(e) for e in np.eye(3)])


def axis_angle_backward(r, grad_R, R=None) -> np.ndarray:
    """Contract dL/dR with the Jacobian without forming it.

    <[w]x, G R^T> = w . m for the skew part m of G R^T, so the contraction
    of the expanded form is a m + b (m x r) + c (r . m) r.
    """
    r = np.asarray(r, dtype=np.float64)
    if R is None:
        R = axis_angle_to_matrix(r)
    M = np.asarray(grad_R, dtype=np.float64) @ R.T
    m = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    angle = np.sqrt(r @ r)
    if angle < JACOBIAN_ZERO_THRESHOLD:
        return m
    a, b, c = _rodrigues_coefficients(angle)
    m_cross_r = np.array([m[1] * r[2] - m[2] * r[1], m[2] * r[0] - m[0] * r[2], m[0] * r[1] - m[1] * r[0]])
    return a * m + b * m_cross_r + c * (r @ m) * r


def _check_points(X, rows, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != rows:
        raise InputError(f"{name} must be {rows}xN, got {X.shape}")
    return X


def rotate_points(R, X) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InputError(f"R must be 3x3, got {R.shape}")
    X = _check_points(X, 3, "X")
    # row-by-row so each column sees the same arithmetic for any N
    return np.stack([R[i, 0] * X[0] + R[i, 1] * X[1] + R[i, 2] * X[2] for i in range(3)])


def rotate_backward(R, X, grad):
    """Return (dL/dR, dL/dX) = (G X^T, R^T G)."""
    G = _check_points(grad, 3, "grad")
    X = _check_points(X, 3, "X")
    if G.shape != X.shape:
        raise InputError("gradient and points shapes differ")
    grad_R = np.sum(G[:, None, :] * X[None, :, :], axis=2)
    return grad_R, rotate_points(np.asarray(R).T, G)


def project_ortho(X) -> np.ndarray:
    return _check_points(X, 3, "X")[:2].copy()


def project_backward(grad) -> np.ndarray:
    G = _check_points(grad, 2, "grad")
    return np.vstack([G, np.zeros((1, G.shape[1]))])


def exp_scale(log_scale: float) -> float:
    return float(np.exp(log_scale))


def scale_points(s: float, Y) -> np.ndarray:
    if not s > 0:
        raise InputError(f"scale must be positive, got {s}")
    return s * _check_points(Y, 2, "Y")


def scale_backward(s: float, Y, grad):
    """Return (dL/ds, dL/dY)."""
    G = _check_points(grad, 2, "grad")
    return float(np.sum(G * Y)), s * G


def translate_points(t, Y) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(2)
    return _check_points(Y, 2, "Y") + t[:, None]


def translate_backward(grad):
    """Return (dL/dt, dL/dY)."""
    G = _check_points(grad, 2, "grad")
    return G.sum(axis=1), G


def grid_generate_vjp(model: MorphableModel, theta: PoseShapeParams, vertices=None):
    """Evaluate the grid generator and return ``(points, backward)``.

    ``backward(G)`` maps a 2xN gradient on the sample points to a
    PoseShapeParams holding dL/dtheta. ``vertices`` restricts the chain to
    a subset of vertices (e.g. landmarks).
    """
    R = axis_angle_to_matrix(theta.r)
    X = synthesize_shape(model, theta.alpha, vertices)
    Xr = rotate_points(R, X)
    Y = project_ortho(Xr)
    s = exp_scale(theta.log_scale)
    points = translate_points(theta.t, scale_points(s, Y))

    def backward(grad) -> PoseShapeParams:
        grad_t, grad_Ys = translate_backward(grad)
        grad_s, grad_Y = scale_backward(s, Y, grad_Ys)
        grad_R, grad_X = rotate_backward(R, X, project_backward(grad_Y))
        return PoseShapeParams(
            r=axis_angle_backward(theta.r, grad_R, R),
            t=grad_t,
            log_scale=grad_s * s,
            alpha=shape_backward(model, grad_X, vertices),
        )

    return points, backward


def grid_generate(model: MorphableModel, theta: PoseShapeParams, vertices=None) -> np.ndarray:
    return grid_generate_vjp(model, theta, vertices)[0]


def posed_shape(model: MorphableModel, theta: PoseShapeParams, vertices=None) -> np.ndarray:
    """Rotated 3D shape in model units (before projection)."""
    return rotate_points(axis_angle_to_matrix(theta.r), synthesize_shape(model, theta.alpha, vertices))


def rotation_angle_between(R1, R2) -> float:
    """Geodesic distance on SO(3) in radians."""
    cos = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1) / 2
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def euler_to_matrix(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """R = Rz(roll) Ry(yaw) Rx(pitch)."""
    return (
        axis_angle_to_matrix([0.0, 0.0, roll])
        @ axis_angle_to_matrix([0.0, yaw, 0.0])
        @ axis_angle_to_matrix([pitch, 0.0, 0.0])
    )


def matrix_to_axis_angle(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R)).as_rotvec()
