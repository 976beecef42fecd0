"""Bilinear sampling onto the output grid, back-face occlusion and masking.

Image pixel (j, k) is row j, column k, both 1-based; a sample point (x, y)
reads along columns with x and along rows with y, so (x, y) = (k, j) hits
pixel (j, k) exactly.
"""

from __future__ import annotations

import numpy as np

from mmstn.errors import InputError
from mmstn.model import MorphableModel, grid_faces, synthesize_shape
from mmstn.transform import rotate_points


def _as_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise InputError(f"image must be HxWxC, got {image.shape}")
    return image


def _as_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != 2:
        raise InputError(f"sample grid must be 2xN, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise InputError("sample grid has non-finite entries")
    return grid


class _Stencil:
    """Cell lookup shared by the forward and backward passes."""

    def __init__(self, shape, grid):
        h, w = shape[:2]
        x, y = grid
        k0 = np.floor(x)
        j0 = np.floor(y)
        # both weights are differences of nearby floats, hence exact
        self.wx1 = x - k0
        self.wx0 = (k0 + 1) - x
        self.wy1 = y - j0
        self.wy0 = (j0 + 1) - y
        # indices into the image padded by one zero pixel on each side
        self.k0 = np.clip(k0, 0, w + 1).astype(np.intp)
        self.k1 = np.clip(k0 + 1, 0, w + 1).astype(np.intp)
        self.j0 = np.clip(j0, 0, h + 1).astype(np.intp)
        self.j1 = np.clip(j0 + 1, 0, h + 1).astype(np.intp)


def _pad(image):
    return np.pad(image, ((1, 1), (1, 1), (0, 0)))


def bilinear_sample(image, grid) -> np.ndarray:
    """Sample an HxWxC image at 2xN points; returns NxC.

    Points more than one pixel outside the image read zero.
    """
    image = _as_image(image)
    grid = _as_grid(grid)
    st = _Stencil(image.shape, grid)
    p = _pad(image)
    top = st.wx0[:, None] * p[st.j0, st.k0] + st.wx1[:, None] * p[st.j0, st.k1]
    bottom = st.wx0[:, None] * p[st.j1, st.k0] + st.wx1[:, None] * p[st.j1, st.k1]
    return st.wy0[:, None] * top + st.wy1[:, None] * bottom


def bilinear_backward(image, grid, grad_out):
    """Return (grad_image HxWxC, grad_grid 2xN).

    On cell boundaries (integer coordinates) the derivative of the cell
    containing the point, i.e. [floor(x), floor(x) + 1), is used.
    """
    image = _as_image(image)
    grid = _as_grid(grid)
    G = np.asarray(grad_out, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    n, c = grid.shape[1], image.shape[2]
    if G.shape != (n, c):
        raise InputError(f"grad_out must be ({n}, {c}), got {G.shape}")
    h, w = image.shape[:2]
    st = _Stencil(image.shape, grid)
    p = _pad(image)
    I00, I01 = p[st.j0, st.k0], p[st.j0, st.k1]
    I10, I11 = p[st.j1, st.k0], p[st.j1, st.k1]
    dx = st.wy0[:, None] * (I01 - I00) + st.wy1[:, None] * (I11 - I10)
    dy = st.wx0[:, None] * (I10 - I00) + st.wx1[:, None] * (I11 - I01)
    grad_grid = np.stack([np.sum(G * dx, axis=1), np.sum(G * dy, axis=1)])

    pw = w + 2
    size = (h + 2) * pw
    corners = [
        (st.j0 * pw + st.k0, st.wy0 * st.wx0),
        (st.j0 * pw + st.k1, st.wy0 * st.wx1),
        (st.j1 * pw + st.k0, st.wy1 * st.wx0),
        (st.j1 * pw + st.k1, st.wy1 * st.wx1),
    ]
    flat = np.zeros((size, c))
    for ch in range(c):
        for idx, weight in corners:
            flat[:, ch] += np.bincount(idx, weights=weight * G[:, ch], minlength=size)
    grad_image = flat.reshape(h + 2, pw, c)[1:-1, 1:-1].copy()
    return grad_image, grad_grid


def kernel_weight_total(image_shape, grid) -> np.ndarray:
    """Sum of bilinear weights landing on real pixels for each point."""
    h, w = image_shape[:2]
    ones = np.ones((h, w, 1))
    return bilinear_sample(ones, grid)[:, 0]


def vertex_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted (unnormalised) vertex normals, 3xN."""
    p = positions.T
    fn = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    n = positions.shape[1]
    out = np.zeros((3, n))
    for corner in range(3):
        for axis in range(3):
            out[axis] += np.bincount(faces[:, corner], weights=fn[:, axis], minlength=n)
    return out


def compute_occlusion(model: MorphableModel, R, alpha, diagnostics: dict | None = None) -> np.ndarray:
    """Back-face visibility mask (uint8, length N) for shape X(alpha) under R.

    Vertex i is visible iff the z component of R n_i is strictly positive.
    Vertices whose incident triangles have zero total area are marked
    occluded and counted in ``diagnostics['degenerate']``. The mask carries
    no gradient with respect to R or alpha.
    """
    X = synthesize_shape(model, alpha)
    normals = vertex_normals(X, grid_faces(model.grid_height, model.grid_width))
    length = np.sqrt(np.sum(normals**2, axis=0))
    scale = max(1.0, float(np.abs(X).max())) ** 2
    degenerate = length <= 1e-12 * scale
    nz = rotate_points(R, normals)[2]
    mask = ((nz > 0) & ~degenerate).astype(np.uint8)
    if diagnostics is not None:
        diagnostics["degenerate"] = int(degenerate.sum())
        diagnostics["visible"] = int(mask.sum())
    return mask


def _as_mask(mask, n):
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise InputError(f"mask must have shape ({n},), got {mask.shape}")
    return mask.astype(np.float64)


def mask_sample(sampled, mask) -> np.ndarray:
    sampled = np.asarray(sampled, dtype=np.float64)
    if sampled.ndim != 2:
        raise InputError("sampled image must be NxC")
    return sampled * _as_mask(mask, sampled.shape[0])[:, None]


def mask_backward(sampled, mask, grad):
    """Return (dL/dV, dL/dM); the mask gradient is never propagated further."""
    sampled = np.asarray(sampled, dtype=np.float64)
    G = np.asarray(grad, dtype=np.float64)
    if G.shape != sampled.shape:
        raise InputError("gradient and sampled image shapes differ")
    m = _as_mask(mask, sampled.shape[0])
    return G * m[:, None], np.sum(G * sampled, axis=1)


def flip_image(image) -> np.ndarray:
    """Horizontal reflection: column k goes to column W + 1 - k."""
    return np.ascontiguousarray(_as_image(image)[:, ::-1])


def mirror_grid(grid, image_width: int) -> np.ndarray:
    grid = _as_grid(grid).copy()
    grid[0] = image_width + 1 - grid[0]
    return grid
