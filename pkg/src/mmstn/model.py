"""Linear statistical shape model on a regular H'xW' vertex grid.

Vertices are numbered row-major over the grid and the stacked shape vector
interleaves (x, y, z) per vertex, so row ``3*j + i`` of the basis holds
coordinate ``i`` of vertex ``j`` (0-based).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from mmstn.errors import InputError

MAGIC = b"MMSTN-MODEL 1\n"

# fractional (u, v) positions of the synthetic landmarks, u left to right,
# v top to bottom; left-side entries are mirrored to build the pairs
_LANDMARK_PAIRS = [
    (0.22, 0.38),  # outer eye corner
    (0.40, 0.38),  # inner eye corner
    (0.30, 0.27),  # brow
    (0.42, 0.58),  # nose wing
    (0.36, 0.74),  # mouth corner
    (0.15, 0.70),  # jaw
]
_LANDMARK_MIDLINE = [0.52, 0.70, 0.90]  # nose tip, upper lip, chin


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape, deformation basis and output-grid topology.

    ``uv_coords`` holds the 1-based (column, row) output-grid position of
    each vertex. ``symmetry_sign`` is +1 for a basis column that is mirror
    symmetric under ``sym_index``, -1 for an antisymmetric one and 0 when
    neither holds.
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    grid_height: int
    grid_width: int
    uv_coords: np.ndarray
    sym_index: np.ndarray
    landmark_indices: np.ndarray
    symmetry_sign: np.ndarray

    def __post_init__(self):
        n = self.grid_height * self.grid_width
        if self.grid_height < 2 or self.grid_width < 2:
            raise InputError("grid must be at least 2x2")
        if self.mean_shape.shape != (3 * n,):
            raise InputError(f"mean_shape must have length {3 * n}, got {self.mean_shape.shape}")
        if self.basis.ndim != 2 or self.basis.shape[0] != 3 * n:
            raise InputError(f"basis must be (3N, D) with 3N={3 * n}, got {self.basis.shape}")
        if self.basis.shape[1] >= 3 * n:
            raise InputError("basis must have fewer columns than rows")
        if self.uv_coords.shape != (n, 2):
            raise InputError("uv_coords must be (N, 2)")
        sym = self.sym_index
        if sym.shape != (n,) or sym.min() < 0 or sym.max() >= n:
            raise InputError("sym_index must be a permutation of range(N)")
        if not np.array_equal(sym[sym], np.arange(n)):
            raise InputError("sym_index must be an involution")
        lm = self.landmark_indices
        if lm.ndim != 1 or (lm.size and (lm.min() < 0 or lm.max() >= n)):
            raise InputError("landmark index out of range")
        if np.unique(lm).size != lm.size:
            raise InputError("landmark indices must be distinct")
        if self.symmetry_sign.shape != (self.basis.shape[1],):
            raise InputError("symmetry_sign must have one entry per basis column")

    @property
    def num_vertices(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def num_modes(self) -> int:
        return self.basis.shape[1]

    @property
    def num_landmarks(self) -> int:
        return self.landmark_indices.size

    def faces(self) -> np.ndarray:
        return grid_faces(self.grid_height, self.grid_width)


def _rows(vertices):
    vertices = np.asarray(vertices, dtype=np.intp)
    return (3 * vertices[:, None] + np.arange(3)).ravel()


def synthesize_shape(model: MorphableModel, alpha, vertices=None) -> np.ndarray:
    """Return the 3xN shape ``reshape(P @ alpha + mu)``.

    With ``vertices`` only those columns are produced. Modes are accumulated
    one at a time so every vertex is computed by the same sequence of
    operations whether or not a subset is requested.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (model.num_modes,):
        raise InputError(f"alpha must have length {model.num_modes}, got {alpha.shape}")
    if vertices is None:
        mu, basis = model.mean_shape, model.basis
    else:
        rows = _rows(vertices)
        mu, basis = model.mean_shape[rows], model.basis[rows]
    x = mu.copy()
    for k in range(alpha.size):
        x += basis[:, k] * alpha[k]
    return x.reshape(-1, 3).T


def shape_backward(model: MorphableModel, grad_positions, vertices=None) -> np.ndarray:
    """Pull a 3xN positions gradient back to the shape coefficients."""
    g = np.asarray(grad_positions, dtype=np.float64)
    n = model.num_vertices if vertices is None else len(vertices)
    if g.shape != (3, n):
        raise InputError(f"grad_positions must be (3, {n}), got {g.shape}")
    basis = model.basis if vertices is None else model.basis[_rows(vertices)]
    return np.sum(basis * g.T.reshape(-1, 1), axis=0)


def whiten_basis(model: MorphableModel, coefficient_std_devs) -> MorphableModel:
    """Scale basis columns so unit-variance coefficients reproduce the model."""
    std = np.asarray(coefficient_std_devs, dtype=np.float64)
    if std.shape != (model.num_modes,):
        raise InputError(f"need {model.num_modes} std devs, got {std.shape}")
    if not np.all(std > 0):
        raise InputError("coefficient std devs must be strictly positive")
    return replace(model, basis=model.basis * std)


def grid_faces(height: int, width: int) -> np.ndarray:
    """Triangulate the vertex grid, splitting each quad top-left to bottom-right.

    Both triangles wind counter-clockwise in (column, row) so that a flat
    grid has normals along +z.
    """
    rows, cols = np.meshgrid(np.arange(height - 1), np.arange(width - 1), indexing="ij")
    tl = (rows * width + cols).ravel()
    tr, bl = tl + 1, tl + width
    br = bl + 1
    upper = np.stack([tl, tr, br], axis=1)
    lower = np.stack([tl, br, bl], axis=1)
    return np.concatenate([upper, lower])


def grid_mirror_index(height: int, width: int) -> np.ndarray:
    """Map vertex (row, col) to (row, width - 1 - col)."""
    idx = np.arange(height * width).reshape(height, width)
    return idx[:, ::-1].ravel().copy()


def grid_uv_coords(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(1, height + 1), np.arange(1, width + 1), indexing="ij")
    return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


def mirror_positions(positions: np.ndarray, sym_index: np.ndarray) -> np.ndarray:
    """Negate x and permute vertices by ``sym_index`` (3xN in, 3xN out)."""
    out = positions[:, sym_index].copy()
    out[0] = -out[0]
    return out


def basis_symmetry_sign(basis: np.ndarray, sym_index: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    signs = np.zeros(basis.shape[1], dtype=np.int64)
    for k in range(basis.shape[1]):
        col = basis[:, k].reshape(-1, 3).T
        mirrored = mirror_positions(col, sym_index)
        scale = max(1.0, np.abs(col).max())
        if np.abs(mirrored - col).max() <= tol * scale:
            signs[k] = 1
        elif np.abs(mirrored + col).max() <= tol * scale:
            signs[k] = -1
    return signs


def landmarks_from_fractions(height, width, pairs=_LANDMARK_PAIRS, midline=_LANDMARK_MIDLINE):
    out = []
    for u, v in pairs:
        row = int(round(v * (height - 1)))
        col = int(round(u * (width - 1)))
        out += [row * width + col, row * width + (width - 1 - col)]
    mid = (width - 1) // 2
    out += [int(round(v * (height - 1))) * width + mid for v in midline]
    return np.array(out, dtype=np.int64)


def _even_odd(field, axis=-1):
    """Split a grid field into parts even and odd under column reversal."""
    flipped = np.flip(field, axis=axis)
    return (field + flipped) / 2, (field - flipped) / 2


def make_synthetic_model(
    seed: int = 1,
    grid_height: int = 64,
    grid_width: int = 64,
    num_modes: int = 10,
    nose: bool = False,
    half_width: float = 45.0,
    half_height: float = 50.0,
    depth: float = 35.0,
) -> MorphableModel:
    """Build a smooth, bilaterally symmetric stand-in for a face model.

    The mean is a paraboloid cap z = depth * (1 - (x/a)^2 - (y/b)^2) sampled on
    a regular (x, y) grid, optionally with a Gaussian nose bump that makes the
    surface non-convex. The first half of the modes are symmetric
    identity-like fields; the rest alternate between antisymmetric and
    symmetric expression-like fields. Coefficients are whitened: alpha ~ N(0, I)
    gives displacements of a few model units.
    """
    if grid_height < 8 or grid_width < 8:
        raise InputError("synthetic grid must be at least 8x8")
    if num_modes < 1:
        raise InputError("need at least one mode")
    rng = np.random.default_rng(seed)
    h, w = grid_height, grid_width
    u = np.linspace(-1.0, 1.0, w)
    u = (u - u[::-1]) / 2
    v = np.linspace(0.0, 1.0, h)
    x = half_width * u
    y = half_height * (2 * v - 1)
    xx, yy = np.meshgrid(x, y)
    a, b = 1.25 * half_width, 1.25 * half_height
    zz = depth * (1 - (xx / a) ** 2 - (yy / b) ** 2)
    if nose:
        sigma = 0.16 * half_width
        zz = zz + 0.5 * depth * np.exp(-(xx**2 + (yy - 0.05 * half_height) ** 2) / (2 * sigma**2))
    xx = _even_odd(xx)[1]
    yy = _even_odd(yy)[0]
    zz = _even_odd(zz)[0]
    mean = np.stack([xx, yy, zz], axis=-1).reshape(-1)

    uu, vv = np.meshgrid(u, v)
    n_freq = 4
    p = np.arange(n_freq)
    even_u = np.cos(p[:, None, None] * np.pi * uu / 2)
    odd_u = np.sin((p[:, None, None] + 1) * np.pi * uu / 2)
    cos_v = np.cos(p[:, None, None] * np.pi * vv)
    decay = 1.0 / (1.0 + p[:, None] + p[None, :])

    def smooth_field(parity_u):
        basis_u = even_u if parity_u == "even" else odd_u
        coef = rng.standard_normal((n_freq, n_freq)) * decay
        f = np.einsum("pq,pij,qij->ij", coef, basis_u, cos_v)
        even, odd = _even_odd(f)
        return even if parity_u == "even" else odd

    # modes carry no similarity motion of the mean, as after Procrustes alignment
    pts = mean.reshape(-1, 3)
    ones, zeros = np.ones(len(pts)), np.zeros(len(pts))
    rigid = [np.stack(g, axis=1).reshape(-1) for g in ((ones, zeros, zeros), (zeros, ones, zeros), (zeros, zeros, ones))]
    rigid += [np.cross(e, pts).reshape(-1) for e in np.eye(3)]
    rigid.append(pts.reshape(-1) - np.tile(pts.mean(axis=0), len(pts)))
    q = np.linalg.qr(np.stack(rigid, axis=1))[0]

    n_identity = (num_modes + 1) // 2
    columns, signs = [], []
    for k in range(num_modes):
        symmetric = k < n_identity or (k - n_identity) % 2 == 1
        if symmetric:
            dx, dy, dz = smooth_field("odd"), smooth_field("even"), smooth_field("even")
        else:
            dx, dy, dz = smooth_field("even"), smooth_field("odd"), smooth_field("odd")
        col = np.stack([0.5 * dx, 0.5 * dy, dz], axis=-1).reshape(-1)
        col = (col - q @ (q.T @ col)).reshape(h, w, 3)
        parity = ("odd", "even", "even") if symmetric else ("even", "odd", "odd")
        col = np.stack(
            [_even_odd(col[..., c])[0 if parity[c] == "even" else 1] for c in range(3)], axis=-1
        ).reshape(-1)
        amplitude = 4.0 if k < n_identity else 2.5
        col *= amplitude / np.sqrt(np.mean(col**2))
        columns.append(col)
        signs.append(1 if symmetric else -1)
    basis = np.stack(columns, axis=1)

    return MorphableModel(
        mean_shape=mean,
        basis=basis,
        grid_height=h,
        grid_width=w,
        uv_coords=grid_uv_coords(h, w),
        sym_index=grid_mirror_index(h, w),
        landmark_indices=landmarks_from_fractions(h, w),
        symmetry_sign=np.array(signs, dtype=np.int64),
    )


_ARRAYS = [
    ("mean_shape", "<f8"),
    ("basis", "<f8"),
    ("uv_coords", "<f8"),
    ("sym_index", "<i8"),
    ("landmark_indices", "<i8"),
    ("symmetry_sign", "<i8"),
]


def model_to_bytes(model: MorphableModel) -> bytes:
    arrays = [(name, np.ascontiguousarray(getattr(model, name), dtype=dt)) for name, dt in _ARRAYS]
    header = {
        "endianness": "little",
        "grid_height": model.grid_height,
        "grid_width": model.grid_width,
        "num_vertices": model.num_vertices,
        "num_modes": model.num_modes,
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
    }
    chunks = [MAGIC, json.dumps(header, sort_keys=True).encode() + b"\n"]
    chunks += [a.tobytes() for _, a in arrays]
    return b"".join(chunks)


def model_from_bytes(data: bytes) -> MorphableModel:
    if not data.startswith(MAGIC):
        raise InputError("not a model container (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    try:
        header = json.loads(data[len(MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise InputError(f"corrupt model header: {exc}") from None
    if header.get("endianness") != "little":
        raise InputError("unsupported endianness")
    offset = end + 1
    fields = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise InputError(f"truncated model container at array {entry['name']}")
        fields[entry["name"]] = np.frombuffer(data, dt, count, offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise InputError("trailing bytes after model arrays")
    return MorphableModel(
        grid_height=int(header["grid_height"]),
        grid_width=int(header["grid_width"]),
        **{k: fields[k].astype(np.int64) if dt == "<i8" else fields[k] for k, dt in _ARRAYS},
    )


def save_model(model: MorphableModel, path) -> None:
    from mmstn.io import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
