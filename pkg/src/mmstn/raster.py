"""Point location in 2D triangulations, a z-buffer and a flat-shaded renderer.

The z-buffer is an independent visibility reference for the back-face
approximation in ``sampler``; the renderer produces synthetic test images.
"""

from __future__ import annotations

import numpy as np


def barycentric(points, a, b, c):
    """Barycentric coordinates of ``points`` in triangles (a, b, c), all Kx2.

    Exact at the triangle corners. Degenerate triangles give NaN.
    """
    ab, ac = b - a, c - a
    ap = points - a
    det = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        lb = (ap[:, 0] * ac[:, 1] - ap[:, 1] * ac[:, 0]) / det
        lc = (ab[:, 0] * ap[:, 1] - ab[:, 1] * ap[:, 0]) / det
    return np.stack([1 - lb - lc, lb, lc], axis=1)


class TriangleLocator:
    """Uniform bucket grid over the bounding box of a 2D triangulation."""

    def __init__(self, points, faces, buckets=None):
        self.points = np.asarray(points, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.intp)
        nf = len(self.faces)
        if buckets is None:
            side = max(1, int(np.sqrt(nf)))
            buckets = (side, side)
        self.shape = np.array(buckets, dtype=np.intp)
        self.lo = self.points.min(axis=0)
        span = self.points.max(axis=0) - self.lo
        self.cell = np.where(span > 0, span / self.shape, 1.0)

        corners = self.points[self.faces]
        tlo = self._cell_of(corners.min(axis=1))
        thi = self._cell_of(corners.max(axis=1))
        extent = thi - tlo + 1
        counts = extent[:, 0] * extent[:, 1]
        tri = np.repeat(np.arange(nf), counts)
        offset = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        bx = tlo[tri, 0] + offset % extent[tri, 0]
        by = tlo[tri, 1] + offset // extent[tri, 0]
        bucket = by * self.shape[0] + bx
        order = np.argsort(bucket, kind="stable")
        self._tri = tri[order]
        self._start = np.searchsorted(bucket[order], np.arange(self.shape.prod() + 1))

    def _cell_of(self, p):
        idx = np.floor((p - self.lo) / self.cell).astype(np.intp)
        return np.clip(idx, 0, self.shape - 1)

    def hits(self, queries, tol=1e-12):
        """Yield (query_index, face_index, barycentrics) for containing faces.

        Each yielded batch holds at most one face per query, so per-query
        accumulation inside a batch is conflict free.
        """
        q = np.asarray(queries, dtype=np.float64)
        rel = (q - self.lo) / self.cell
        inside_box = np.all((rel >= -1e-9) & (rel <= self.shape + 1e-9), axis=1)
        cell = self._cell_of(q)
        bucket = cell[:, 1] * self.shape[0] + cell[:, 0]
        start = self._start[bucket]
        count = np.where(inside_box, self._start[bucket + 1] - start, 0)
        for slot in range(int(count.max(initial=0))):
            qi = np.nonzero(count > slot)[0]
            fi = self._tri[start[qi] + slot]
            f = self.faces[fi]
            lam = barycentric(q[qi], self.points[f[:, 0]], self.points[f[:, 1]], self.points[f[:, 2]])
            ok = np.all(lam >= -tol, axis=1)
            yield qi[ok], fi[ok], lam[ok]


def zbuffer_visibility(positions, faces, tol=1e-6, buckets=None) -> np.ndarray:
    """Visibility of each vertex of a posed mesh (3xN) seen from z = +inf.

    Every triangle is rasterised at the projected location of every vertex
    it covers; a vertex is visible iff its depth is within ``tol`` of the
    front-most depth there.
    """
    positions = np.asarray(positions, dtype=np.float64)
    xy = positions[:2].T
    z = positions[2]
    front = np.full(len(z), -np.inf)
    loc = TriangleLocator(xy, faces, buckets)
    for qi, fi, lam in loc.hits(xy):
        depth = np.sum(lam * z[faces[fi]], axis=1)
        front[qi] = np.maximum(front[qi], depth)
    return z >= front - tol


def render(points2d, depth, faces, vertex_attr, shape, background, buckets=None):
    """Rasterise a mesh with per-vertex attributes at pixel centres.

    ``points2d`` is 2xN in pixel coordinates (x = column, y = row, 1-based),
    ``vertex_attr`` is NxA and is interpolated barycentrically on the
    front-most triangle. Returns (HxWxA attributes, HxW coverage).
    """
    h, w = shape
    attr = np.asarray(vertex_attr, dtype=np.float64)
    rows, cols = np.meshgrid(np.arange(1, h + 1), np.arange(1, w + 1), indexing="ij")
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    best = np.full(len(pix), -np.inf)
    out = np.broadcast_to(np.asarray(background, dtype=np.float64).reshape(h * w, -1), (h * w, attr.shape[1])).copy()
    loc = TriangleLocator(np.asarray(points2d).T, faces, buckets)
    for qi, fi, lam in loc.hits(pix):
        d = np.sum(lam * depth[faces[fi]], axis=1)
        closer = d > best[qi]
        qi, fi, lam, d = qi[closer], fi[closer], lam[closer], d[closer]
        best[qi] = d
        out[qi] = np.einsum("kc,kca->ka", lam, attr[faces[fi]])
    return out.reshape(h, w, -1), np.isfinite(best).reshape(h, w)
