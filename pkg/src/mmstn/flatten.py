"""Output-grid construction: Tutte embedding, mirroring and grid remeshing.

A half mesh (one side of a bilaterally symmetric surface, with the symmetry
line on its boundary) is embedded in the left or right half of the unit
square, reflected to obtain the full embedding, and the mean shape and basis
fields are resampled on a regular H'xW' grid in that parameter domain.
uv = (u, v) with u along grid columns and v along grid rows.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mmstn.errors import InputError, SolverError
from mmstn.model import (
    MorphableModel,
    basis_symmetry_sign,
    grid_mirror_index,
    grid_uv_coords,
    landmarks_from_fractions,
)
from mmstn.raster import TriangleLocator, barycentric

NEGATIVE_WEIGHT_CLAMP = 1e-6
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (M, 3)
    faces: np.ndarray  # (F, 3)
    boundary: np.ndarray  # ordered boundary cycle
    symmetry_line: np.ndarray  # ordered path between two boundary vertices

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=np.int64))
        object.__setattr__(self, "symmetry_line", np.asarray(self.symmetry_line, dtype=np.int64))
        m = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InputError("vertices must be (M, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InputError("faces must be (F, 3)")
        for name in ("faces", "boundary", "symmetry_line"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= m):
                raise InputError(f"{name} references a missing vertex")
        if len(self.symmetry_line) < 2:
            raise InputError("symmetry line needs at least two vertices")


@dataclass(frozen=True, eq=False)
class GeometryImage:
    grid: np.ndarray  # (K, H', W', 3): mean first, then basis fields
    uv_grid: np.ndarray  # (H', W', 2)

    @property
    def shape(self):
        return self.grid.shape[1:3]


def _edge_counts(faces):
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def check_disk_topology(mesh: TriangleMesh) -> None:
    """Reject anything that is not an edge-manifold disk with the given boundary."""
    used = np.unique(mesh.faces)
    if len(used) != len(mesh.vertices):
        raise InputError("mesh has vertices not referenced by any face")
    if np.any(mesh.faces[:, 0] == mesh.faces[:, 1]) or np.any(mesh.faces[:, 1] == mesh.faces[:, 2]) or np.any(
        mesh.faces[:, 0] == mesh.faces[:, 2]
    ):
        raise InputError("mesh has degenerate faces")
    edges, counts = _edge_counts(mesh.faces)
    if np.any(counts > 2):
        raise InputError("mesh is not edge-manifold")
    euler = len(mesh.vertices) - len(edges) + len(mesh.faces)
    if euler != 1:
        raise InputError(f"mesh is not a disk (Euler characteristic {euler})")
    bedges = edges[counts == 1]
    degree = Counter(bedges.ravel().tolist())
    if any(d != 2 for d in degree.values()):
        raise InputError("boundary is not a simple cycle")
    loop = mesh.boundary
    if len(loop) != len(degree) or len(set(loop.tolist())) != len(loop):
        raise InputError("boundary loop does not match the mesh boundary")
    given = {tuple(sorted(e)) for e in zip(loop.tolist(), np.roll(loop, -1).tolist())}
    if given != {tuple(e) for e in bedges.tolist()}:
        raise InputError("boundary loop does not match the mesh boundary")
    on_boundary = set(loop.tolist())
    line = mesh.symmetry_line
    if line[0] not in on_boundary or line[-1] not in on_boundary:
        raise InputError("symmetry line endpoints must lie on the boundary")


def signed_areas(uv, faces) -> np.ndarray:
    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def count_flipped(uv, faces) -> int:
    """Triangles whose orientation disagrees with the overall orientation, or are degenerate."""
    area = signed_areas(uv, faces)
    orientation = 1.0 if area.sum() >= 0 else -1.0
    return int(np.sum(area * orientation <= 0))


def _arc_fractions(points):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise InputError("boundary arc has zero length")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def _half_perimeter(tau, left: bool):
    """Map arc fraction tau in [0, 1] onto the half square perimeter from (1/2, 0) to (1/2, 1)."""
    d = 2.0 * tau
    u = np.where(d <= 0.5, 0.5 - d, np.where(d <= 1.5, 0.0, d - 1.5))
    v = np.where(d <= 0.5, 0.0, np.where(d <= 1.5, d - 0.5, 1.0))
    if not left:
        u = 1.0 - u
    return np.stack([u, v], axis=1)


def _boundary_arcs(loop, start, end):
    """Split a cyclic loop into the two paths from ``start`` to ``end``."""
    loop = list(loop)
    i = loop.index(start)
    loop = loop[i:] + loop[:i]
    j = loop.index(end)
    forward = loop[: j + 1]
    backward = [loop[0]] + loop[j:][::-1]
    return forward, backward


def laplacian_weights(mesh: TriangleMesh, scheme: str) -> sp.csr_matrix:
    """Symmetric sparse edge-weight matrix (zero diagonal)."""
    f = mesh.faces
    m = len(mesh.vertices)
    if scheme == "uniform":
        i = f[:, [0, 1, 2]].ravel()
        j = f[:, [1, 2, 0]].ravel()
        w = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(m, m)).tocsr()
        w = w + w.T
        w.data[:] = 1.0
        return w
    if scheme in ("cotangent", "cotangentClamped", "cotangent_clamped"):
        p = mesh.vertices
        rows, cols, vals = [], [], []
        for corner in range(3):
            o, a, b = f[:, corner], f[:, (corner + 1) % 3], f[:, (corner + 2) % 3]
            ea, eb = p[a] - p[o], p[b] - p[o]
            cos = np.sum(ea * eb, axis=1)
            sin = np.linalg.norm(np.cross(ea, eb), axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                cot = cos / sin
            cot = np.where(np.isfinite(cot), cot, 0.0)
            rows += [a, b]
            cols += [b, a]
            vals += [0.5 * cot, 0.5 * cot]
        w = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
        ).tocsr()
        w.sum_duplicates()
        w.data = np.maximum(w.data, NEGATIVE_WEIGHT_CLAMP)
        return w
    raise InputError(f"unknown weight scheme {scheme!r}")


def _fixed_positions(mesh: TriangleMesh):
    """Boundary and symmetry-line placements on the unit square."""
    loop = mesh.boundary.tolist()
    line = mesh.symmetry_line.tolist()
    s0, s1 = line[0], line[-1]
    xy = mesh.vertices
    line_x = xy[line, 0].mean()
    fixed = {}

    line_uv = np.stack([np.full(len(line), 0.5), _arc_fractions(xy[line])], axis=1)
    for idx, uv in zip(line, line_uv):
        fixed[idx] = uv

    arcs = _boundary_arcs(loop, s0, s1)
    line_set = set(line)
    if line_set <= set(loop):
        # half mesh: one arc traces the symmetry line, the other is the outer boundary
        arcs = [a for a in arcs if a != line]
        if len(arcs) != 1:
            raise InputError("symmetry line must be a contiguous part of a half-mesh boundary")
    for arc in arcs:
        interior = arc[1:-1] if len(arc) > 2 else arc
        left = xy[interior, 0].mean() < line_x
        for idx, uv in zip(arc, _half_perimeter(_arc_fractions(xy[arc]), left)):
            if idx not in line_set:
                fixed[idx] = uv
    return fixed


@dataclass(frozen=True, eq=False)
class Embedding:
    uv: np.ndarray  # (M, 2)


def tutte_embed(mesh: TriangleMesh, weights: str = "uniform") -> Embedding:
    """Harmonic (Tutte) embedding with the boundary fixed on the unit square.

    The symmetry line is pinned to u = 1/2 with v by arc length, its first
    vertex at the top edge (v = 0). Each boundary half runs by arc length
    along its half of the square perimeter; the half on the smaller-x side
    of the symmetry line goes to u < 1/2. If the symmetry line is part of
    the boundary (a half mesh) only the outer arc is placed.
    """
    check_disk_topology(mesh)
    fixed = _fixed_positions(mesh)
    m = len(mesh.vertices)
    W = laplacian_weights(mesh, weights)
    is_fixed = np.zeros(m, dtype=bool)
    is_fixed[list(fixed)] = True
    uv = np.zeros((m, 2))
    for idx, pos in fixed.items():
        uv[idx] = pos
    free = np.nonzero(~is_fixed)[0]
    if len(free):
        L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
        L = L.tocsr()
        A = L[free][:, free].tocsc()
        b = -(L[free][:, is_fixed] @ uv[is_fixed])
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                x = spla.spsolve(A, b)
            except (spla.MatrixRankWarning, RuntimeError) as exc:
                raise SolverError(f"Tutte system is singular: {exc}") from None
        x = np.asarray(x).reshape(len(free), 2)
        residual = np.abs(A @ x - b).max()
        if not np.all(np.isfinite(x)) or residual > RESIDUAL_TOL * max(1.0, np.abs(b).max()):
            raise SolverError(f"Tutte solve residual {residual:.3e} above tolerance")
        uv[free] = x
    return Embedding(uv)


def _mirror_map(half: TriangleMesh):
    m = len(half.vertices)
    on_line = np.zeros(m, dtype=bool)
    on_line[half.symmetry_line] = True
    mirror_of = np.arange(m)
    others = np.nonzero(~on_line)[0]
    mirror_of[others] = m + np.arange(len(others))
    return mirror_of, others


def mirror_mesh(half: TriangleMesh, fields=(), signs=None):
    """Reflect a half mesh across its symmetry plane x = mean x of the line.

    Returns (full_mesh, sym, mirrored_fields). The first M vertices of the
    full mesh are the half mesh; ``sym`` maps each vertex to its mirror.
    Fields are (M, 3) vector fields, reflected as symmetric (+1) or
    antisymmetric (-1) according to ``signs``.
    """
    mirror_of, others = _mirror_map(half)
    m = len(half.vertices)
    plane = half.vertices[half.symmetry_line, 0].mean()
    reflected = half.vertices[others].copy()
    reflected[:, 0] = 2 * plane - reflected[:, 0]
    vertices = np.vstack([half.vertices, reflected])
    faces = np.vstack([half.faces, mirror_of[half.faces][:, ::-1]])
    line = half.symmetry_line.tolist()
    s0, s1 = line[0], line[-1]
    arcs = _boundary_arcs(half.boundary.tolist(), s0, s1)
    outer = [a for a in arcs if set(a[1:-1]).isdisjoint(line)]
    if len(outer) != 1:
        raise InputError("symmetry line must be a contiguous part of a half-mesh boundary")
    outer = outer[0]
    boundary = outer + [int(mirror_of[k]) for k in outer[::-1][1:-1]]
    full = TriangleMesh(vertices, faces, boundary, half.symmetry_line)
    sym = np.arange(len(vertices))
    sym[others] = mirror_of[others]
    sym[mirror_of[others]] = others
    signs = np.ones(len(fields)) if signs is None else np.asarray(signs)
    out_fields = []
    for field, sign in zip(fields, signs):
        field = np.asarray(field, dtype=np.float64)
        mirrored = field[others].copy()
        mirrored[:, 0] = -mirrored[:, 0]
        out_fields.append(np.vstack([field, sign * mirrored]))
    return full, sym, out_fields


def mirror_embedding(half_embedding: Embedding, half_mesh: TriangleMesh, tol: float = 1e-12) -> Embedding:
    """Complete a half-mesh embedding by reflection u -> 1 - u.

    Vertex order matches :func:`mirror_mesh`.
    """
    uv = np.asarray(half_embedding.uv, dtype=np.float64)
    line = half_mesh.symmetry_line
    if np.abs(uv[line, 0] - 0.5).max() > tol:
        raise InputError("symmetry-line vertices must have u = 1/2")
    mirror_of, others = _mirror_map(half_mesh)
    mirrored = uv[others].copy()
    mirrored[:, 0] = 1.0 - mirrored[:, 0]
    return Embedding(np.vstack([uv, mirrored]))


def grid_uv(height: int, width: int) -> np.ndarray:
    """(H, W, 2) parameter coordinates of the output-grid nodes."""
    v, u = np.meshgrid(np.arange(height) / (height - 1), np.arange(width) / (width - 1), indexing="ij")
    return np.stack([u, v], axis=-1)


def _nearest_on_boundary(points, uv, loop):
    a = uv[loop]
    b = uv[np.roll(loop, -1)]
    ab = b - a
    out_edge = np.empty(len(points), dtype=np.intp)
    out_t = np.empty(len(points))
    for n, p in enumerate(points):
        t = np.clip(np.sum((p - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        d = np.sum((a + t[:, None] * ab - p) ** 2, axis=1)
        k = int(np.argmin(d))
        out_edge[n], out_t[n] = k, t[k]
    return out_edge, out_t


def remesh_to_grid(mesh: TriangleMesh, embedding: Embedding, fields, height: int, width: int) -> GeometryImage:
    """Barycentrically resample (M, 3) vertex fields at the H'xW' grid nodes."""
    if height < 2 or width < 2:
        raise InputError("grid must be at least 2x2")
    uv = np.asarray(embedding.uv, dtype=np.float64)
    if count_flipped(uv, mesh.faces):
        raise InputError("embedding is not injective")
    stacked = np.stack([np.asarray(f, dtype=np.float64) for f in fields], axis=1)  # (M, K, 3)
    nodes = grid_uv(height, width).reshape(-1, 2)
    found = np.zeros(len(nodes), dtype=bool)
    values = np.zeros((len(nodes),) + stacked.shape[1:])
    side = max(1, int(np.sqrt(len(mesh.faces))))
    loc = TriangleLocator(uv, mesh.faces, (side, side))
    for qi, fi, lam in loc.hits(nodes):
        new = ~found[qi]
        qi, fi, lam = qi[new], fi[new], lam[new]
        found[qi] = True
        values[qi] = np.einsum("nc,ncka->nka", lam, stacked[mesh.faces[fi]])
    missing = np.nonzero(~found)[0]
    if len(missing):
        loop = mesh.boundary
        edge, t = _nearest_on_boundary(nodes[missing], uv, loop)
        a, b = loop[edge], np.roll(loop, -1)[edge]
        values[missing] = (1 - t)[:, None, None] * stacked[a] + t[:, None, None] * stacked[b]
    grid = values.reshape(height, width, stacked.shape[1], 3).transpose(2, 0, 1, 3)
    return GeometryImage(np.ascontiguousarray(grid), grid_uv(height, width))


def assemble_model(image: GeometryImage, landmark_indices=None, symmetry_sign=None) -> MorphableModel:
    k, h, w, _ = image.grid.shape
    mean = image.grid[0].reshape(-1)
    basis = image.grid[1:].reshape(k - 1, h * w * 3).T.copy()
    sym = grid_mirror_index(h, w)
    if symmetry_sign is None:
        symmetry_sign = basis_symmetry_sign(basis, sym, tol=1e-8)
    if landmark_indices is None:
        landmark_indices = landmarks_from_fractions(h, w)
    return MorphableModel(
        mean_shape=mean.copy(),
        basis=basis,
        grid_height=h,
        grid_width=w,
        uv_coords=grid_uv_coords(h, w),
        sym_index=sym,
        landmark_indices=np.asarray(landmark_indices, dtype=np.int64),
        symmetry_sign=np.asarray(symmetry_sign, dtype=np.int64),
    )


def flatten_half_mesh(half: TriangleMesh, fields, height, width, weights="uniform", signs=None):
    """Half mesh + (M, 3) fields -> (MorphableModel, report dict)."""
    half_emb = tutte_embed(half, weights)
    full, sym, full_fields = mirror_mesh(half, fields, signs)
    emb = mirror_embedding(half_emb, half)
    image = remesh_to_grid(full, emb, full_fields, height, width)
    report = {
        "flipped_half": count_flipped(half_emb.uv, half.faces),
        "flipped_full": count_flipped(emb.uv, full.faces),
        "vertices": len(full.vertices),
        "faces": len(full.faces),
    }
    return assemble_model(image, symmetry_sign=signs), report, (full, emb, image)


def grid_mesh(nx: int, ny: int, jitter: float = 0.0, seed: int = 0, alternate: bool = False, split_corners: bool = True):
    """Triangulated (nx x ny) lattice on [0, 1]^2 as (points (M, 2), faces, boundary loop).

    Interior points are optionally jittered by ``jitter`` cells.
    """
    rng = np.random.default_rng(seed)
    s, t = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny))
    pts = np.stack([s.ravel(), t.ravel()], axis=1)
    interior = (s.ravel() > 0) & (s.ravel() < 1) & (t.ravel() > 0) & (t.ravel() < 1)
    if jitter:
        step = np.array([1 / (nx - 1), 1 / (ny - 1)])
        pts[interior] += rng.uniform(-jitter, jitter, (interior.sum(), 2)) * step
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a, b = j * nx + i, j * nx + i + 1
            c, d = a + nx, b + nx
            corner_bc = split_corners and (i, j) in ((nx - 2, 0), (0, ny - 2))
            corner_ad = (i, j) in ((0, 0), (nx - 2, ny - 2))
            # split corner cells through the corner so no face has three boundary vertices
            if corner_bc or (alternate and (i + j) % 2 and not corner_ad):
                faces += [(a, b, c), (b, d, c)]
            else:
                faces += [(a, b, d), (a, d, c)]
    top = list(range(nx))
    right = [j * nx + nx - 1 for j in range(1, ny)]
    bottom = [(ny - 1) * nx + i for i in range(nx - 2, -1, -1)]
    left = [j * nx for j in range(ny - 2, 0, -1)]
    return pts, np.array(faces, dtype=np.int64), np.array(top + right + bottom + left, dtype=np.int64)


def planar_square_mesh(n: int = 9) -> TriangleMesh:
    """Unit square lattice in the z = 0 plane with the line u = 1/2 as symmetry line (n odd)."""
    if n % 2 == 0:
        raise InputError("need an odd lattice size so the midline is a mesh column")
    # one diagonal everywhere keeps every interior stencil point-symmetric
    pts, faces, loop = grid_mesh(n, n, split_corners=False)
    vertices = np.column_stack([pts, np.zeros(len(pts))])
    line = np.arange(n) * n + n // 2
    return TriangleMesh(vertices, faces, loop, line)


def synthetic_half_mesh(seed: int = 0, nx: int = 14, ny: int = 28, num_modes: int = 4,
                        half_width: float = 45.0, half_height: float = 50.0, depth: float = 35.0):
    """Irregular left half of a dome-shaped face surface with smooth mode fields.

    Returns (mesh, [mean, mode_1, ...]) with fields as (M, 3) arrays. The
    symmetry line is the x = 0 column ordered from top (y = -half_height)
    to bottom.
    """
    pts, faces, _ = grid_mesh(nx, ny, jitter=0.3, seed=seed, alternate=True)
    s, t = pts[:, 0], pts[:, 1]
    # s = 0 is the outer edge, s = 1 the symmetry line
    yy = half_height * (2 * t - 1)
    outline = np.sqrt(1 - 0.6 * (2 * t - 1) ** 2)
    xx = -half_width * (1 - s) * outline
    zz = depth * (1 - (xx / (1.25 * half_width)) ** 2 - (yy / (1.25 * half_height)) ** 2)
    vertices = np.column_stack([xx, yy, zz])
    # the lattice runs left to right in s, so keep the orientation positive in (x, y)
    line = np.arange(ny) * nx + (nx - 1)
    top = list(range(nx))
    right = [j * nx + nx - 1 for j in range(1, ny)]
    bottom = [(ny - 1) * nx + i for i in range(nx - 2, -1, -1)]
    left = [j * nx for j in range(ny - 2, 0, -1)]
    loop = np.array(top + right + bottom + left, dtype=np.int64)
    mesh = TriangleMesh(vertices, faces, loop, line)

    rng = np.random.default_rng(seed + 1)
    fields = [vertices.copy()]
    xn, yn = xx / half_width, yy / half_height
    for _ in range(num_modes):
        c = rng.standard_normal((3, 3, 3)) / (1 + np.arange(3))[None, :, None]
        # even in x for y and z, odd in x for the x component: mirror symmetric modes
        dx = sum(c[0, p, q] * np.sin((p + 1) * np.pi * xn / 2) * np.cos(q * np.pi * yn) for p in range(3) for q in range(3))
        dy = sum(c[1, p, q] * np.cos(p * np.pi * xn / 2) * np.cos(q * np.pi * yn) for p in range(3) for q in range(3))
        dz = sum(c[2, p, q] * np.cos(p * np.pi * xn / 2) * np.cos(q * np.pi * yn) for p in range(3) for q in range(3))
        field = np.column_stack([0.5 * dx, 0.5 * dy, dz])
        field[line, 0] = 0.0
        fields.append(3.0 * field / np.sqrt(np.mean(field**2)))
    return mesh, fields


def is_half_mesh(mesh: TriangleMesh) -> bool:
    """True when the whole symmetry line lies on the boundary."""
    return set(mesh.symmetry_line.tolist()) <= set(mesh.boundary.tolist())


def flatten_mesh(mesh: TriangleMesh, fields, height, width, weights="uniform", signs=None):
    """Half or full mesh + (M, 3) fields -> (MorphableModel, report, (mesh, embedding, image)).

    Half meshes are embedded, mirrored and remeshed; a full mesh (symmetry
    line through the interior) is embedded directly.
    """
    if is_half_mesh(mesh):
        return flatten_half_mesh(mesh, fields, height, width, weights, signs)
    emb = tutte_embed(mesh, weights)
    image = remesh_to_grid(mesh, emb, fields, height, width)
    report = {
        "flipped_half": None,
        "flipped_full": count_flipped(emb.uv, mesh.faces),
        "vertices": len(mesh.vertices),
        "faces": len(mesh.faces),
    }
    return assemble_model(image, symmetry_sign=signs), report, (mesh, emb, image)


def planar_deviation(mesh: TriangleMesh, embedding: Embedding) -> float:
    """Max distance between uv and the mesh's xy rescaled to the unit square."""
    xy = mesh.vertices[:, :2]
    lo, span = xy.min(axis=0), np.ptp(xy, axis=0)
    span = np.where(span > 0, span, 1.0)
    return float(np.abs(embedding.uv - (xy - lo) / span).max())
