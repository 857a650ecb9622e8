"""Triangle meshes with a bounding-volume hierarchy for closest-point and ray queries.

The BVH splits faces at the median centroid along the widest centroid axis.
Node boxes are padded by a small relative margin so that box tests can never
reject a triangle whose own computed distance or hit parameter would tie the
current best; with strict pruning (``box > best``) the BVH returns exactly
what the exhaustive loop over all faces returns, including the lowest-index
tie rule.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit, prange

BVH_LEAF_SIZE = 4
_BOX_PAD = 1e-9
_DEGENERATE_AREA2 = 1e-30


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    allow_degenerate: bool = False

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices must be finite")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"face index out of range for {len(self.vertices)} vertices")
        if not self.allow_degenerate and len(self.faces):
            bad = np.flatnonzero(self.double_areas() <= 0.0)
            if len(bad):
                raise ValueError(f"{len(bad)} degenerate (zero-area) faces, first is face {bad[0]}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def triangles(self):
        return self.vertices[self.faces]

    def double_areas(self):
        t = self.triangles()
        return np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self):
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def same_topology(self, other):
        return (self.n_vertices == other.n_vertices and self.faces.shape == other.faces.shape
                and np.array_equal(self.faces, other.faces))

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.faces, self.allow_degenerate)

    def evaluate(self, face, bary):
        """Surface positions at (face, barycentric) pairs."""
        face = np.asarray(face, dtype=np.int64)
        bary = np.asarray(bary, dtype=np.float64)
        tri = self.vertices[self.faces[face]]
        return np.einsum("...k,...kj->...j", bary, tri)

    @cached_property
    def bvh(self):
        return MeshBVH(self)


# -- triangle kernels -------------------------------------------------------

@njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True, inline="always")
def _segment_param(px, py, pz, ax, ay, az, bx, by, bz):
    ex, ey, ez = bx - ax, by - ay, bz - az
    ee = _dot(ex, ey, ez, ex, ey, ez)
    if ee <= 0.0:
        return 0.0
    t = _dot(px - ax, py - ay, pz - az, ex, ey, ez) / ee
    return min(max(t, 0.0), 1.0)


@njit(cache=True)
def closest_barycentric(p, a, b, c):
    """Barycentric coordinates of the point of triangle abc closest to p.

    Region classification after Ericson, Real-Time Collision Detection 5.1.5;
    zero-area triangles fall back to the closest of their three edges.
    """
    px, py, pz = p[0], p[1], p[2]
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    nx = aby * acz - abz * acy
    ny = abz * acx - abx * acz
    nz = abx * acy - aby * acx
    if nx * nx + ny * ny + nz * nz <= _DEGENERATE_AREA2:
        best = np.inf
        r0, r1, r2 = 1.0, 0.0, 0.0
        for e in range(3):
            if e == 0:
                u, v, i, j = a, b, 0, 1
            elif e == 1:
                u, v, i, j = b, c, 1, 2
            else:
                u, v, i, j = a, c, 0, 2
            t = _segment_param(px, py, pz, u[0], u[1], u[2], v[0], v[1], v[2])
            qx = u[0] + t * (v[0] - u[0]) - px
            qy = u[1] + t * (v[1] - u[1]) - py
            qz = u[2] + t * (v[2] - u[2]) - pz
            d = qx * qx + qy * qy + qz * qz
            if d < best:
                best = d
                w = np.zeros(3)
                w[i] = 1.0 - t
                w[j] = t
                r0, r1, r2 = w[0], w[1], w[2]
        return r0, r1, r2
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit(cache=True, inline="always")
def _point_tri_d2(p, a, b, c):
    b0, b1, b2 = closest_barycentric(p, a, b, c)
    qx = b0 * a[0] + b1 * b[0] + b2 * c[0] - p[0]
    qy = b0 * a[1] + b1 * b[1] + b2 * c[1] - p[1]
    qz = b0 * a[2] + b1 * b[2] + b2 * c[2] - p[2]
    return qx * qx + qy * qy + qz * qz, b0, b1, b2


@njit(cache=True, inline="always")
def _ray_tri(ox, oy, oz, dx, dy, dz, a, b, c):
    # two-sided Moller-Trumbore; returns (t, u, v) or t = inf on a miss
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - a[0], oy - a[1], oz - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if not t > 0.0:
        return np.inf, 0.0, 0.0
    return t, u, v


# -- BVH construction ---------------------------------------------------------

@njit(cache=True)
def _build_bvh(tris, leaf_size, pad):
    n = tris.shape[0]
    cent = np.empty((n, 3))
    tlo = np.empty((n, 3))
    thi = np.empty((n, 3))
    for f in range(n):
        for a in range(3):
            x0, x1, x2 = tris[f, 0, a], tris[f, 1, a], tris[f, 2, a]
            cent[f, a] = (x0 + x1 + x2) / 3.0
            tlo[f, a] = min(x0, min(x1, x2))
            thi[f, a] = max(x0, max(x1, x2))
    order = np.arange(n)
    cap = 2 * n + 1
    start = np.empty(cap, np.int64)
    stop = np.empty(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    stack = np.empty(cap, np.int64)
    start[0] = 0
    stop[0] = n
    stack[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s, e = start[node], stop[node]
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(s, e):
            f = order[i]
            for a in range(3):
                lo[node, a] = tlo[f, a] if i == s else min(lo[node, a], tlo[f, a])
                hi[node, a] = thi[f, a] if i == s else max(hi[node, a], thi[f, a])
                clo[a] = min(clo[a], cent[f, a])
                chi[a] = max(chi[a], cent[f, a])
        for a in range(3):
            m = pad * (1.0 + abs(lo[node, a]) + abs(hi[node, a]))
            lo[node, a] -= m
            hi[node, a] += m
        if e - s <= leaf_size:
            continue
        axis = 0
        for a in range(1, 3):
            if chi[a] - clo[a] > chi[axis] - clo[axis]:
                axis = a
        keys = np.empty(e - s)
        for i in range(s, e):
            keys[i - s] = cent[order[i], axis]
        # stable sort keeps the split deterministic under equal centroids
        idx = np.argsort(keys, kind="mergesort")
        seg = order[s:e].copy()
        for i in range(e - s):
            order[s + i] = seg[idx[i]]
        mid = (s + e) // 2
        l = n_nodes
        n_nodes += 2
        left[node] = l
        start[l], stop[l] = s, mid
        start[l + 1], stop[l + 1] = mid, e
        stack[sp] = l
        stack[sp + 1] = l + 1
        sp += 2
    m = n_nodes
    return order, start[:m].copy(), stop[:m].copy(), left[:m].copy(), lo[:m].copy(), hi[:m].copy()


@njit(cache=True, inline="always")
def _box_point_d2(p, lo, hi, node):
    d = 0.0
    for a in range(3):
        if p[a] < lo[node, a]:
            t = lo[node, a] - p[a]
            d += t * t
        elif p[a] > hi[node, a]:
            t = p[a] - hi[node, a]
            d += t * t
    return d


@njit(cache=True, inline="always")
def _box_ray_tnear(ox, oy, oz, ix, iy, iz, lo, hi, node):
    t0 = 0.0
    t1 = np.inf
    o = (ox, oy, oz)
    inv = (ix, iy, iz)
    for a in range(3):
        if np.isinf(inv[a]):
            if o[a] < lo[node, a] or o[a] > hi[node, a]:
                return np.inf
            continue
        ta = (lo[node, a] - o[a]) * inv[a]
        tb = (hi[node, a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t0 > t1:
        return np.inf
    return t0


# -- queries ------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _closest_bvh(points, tris, order, start, stop, left, lo, hi, out_face, out_bary, out_d2):
    n = points.shape[0]
    for k in prange(n):
        p = points[k]
        stack = np.empty(128, np.int64)
        stack[0] = 0
        sp = 1
        best = np.inf
        best_f = -1
        b0 = b1 = b2 = 0.0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_point_d2(p, lo, hi, node) > best:
                continue
            l = left[node]
            if l < 0:
                for i in range(start[node], stop[node]):
                    f = order[i]
                    d, c0, c1, c2 = _point_tri_d2(p, tris[f, 0], tris[f, 1], tris[f, 2])
                    if d < best or (d == best and f < best_f):
                        best, best_f = d, f
                        b0, b1, b2 = c0, c1, c2
                continue
            dl = _box_point_d2(p, lo, hi, l)
            dr = _box_point_d2(p, lo, hi, l + 1)
            if dl <= dr:
                stack[sp] = l + 1
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = l + 1
            sp += 2
        out_face[k] = best_f
        out_bary[k, 0] = b0
        out_bary[k, 1] = b1
        out_bary[k, 2] = b2
        out_d2[k] = best


@njit(cache=True, parallel=True)
def _closest_exhaustive(points, tris, out_face, out_bary, out_d2):
    for k in prange(points.shape[0]):
        p = points[k]
        best = np.inf
        best_f = -1
        b0 = b1 = b2 = 0.0
        for f in range(tris.shape[0]):
            d, c0, c1, c2 = _point_tri_d2(p, tris[f, 0], tris[f, 1], tris[f, 2])
            if d < best:
                best, best_f = d, f
                b0, b1, b2 = c0, c1, c2
        out_face[k] = best_f
        out_bary[k, 0] = b0
        out_bary[k, 1] = b1
        out_bary[k, 2] = b2
        out_d2[k] = best


@njit(cache=True, parallel=True)
def _raycast_bvh(origins, dirs, tris, order, start, stop, left, lo, hi, out_face, out_t, out_uv):
    n = origins.shape[0]
    for k in prange(n):
        ox, oy, oz = origins[k, 0], origins[k, 1], origins[k, 2]
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        stack = np.empty(128, np.int64)
        stack[0] = 0
        sp = 1
        best = np.inf
        best_f = -1
        bu = bv = 0.0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_ray_tnear(ox, oy, oz, ix, iy, iz, lo, hi, node) > best:
                continue
            l = left[node]
            if l < 0:
                for i in range(start[node], stop[node]):
                    f = order[i]
                    t, u, v = _ray_tri(ox, oy, oz, dx, dy, dz, tris[f, 0], tris[f, 1], tris[f, 2])
                    if t < best or (t == best and f < best_f):
                        best, best_f, bu, bv = t, f, u, v
                continue
            tl = _box_ray_tnear(ox, oy, oz, ix, iy, iz, lo, hi, l)
            tr = _box_ray_tnear(ox, oy, oz, ix, iy, iz, lo, hi, l + 1)
            if tl <= tr:
                stack[sp] = l + 1
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = l + 1
            sp += 2
        out_face[k] = best_f
        out_t[k] = best
        out_uv[k, 0] = bu
        out_uv[k, 1] = bv


@njit(cache=True, parallel=True)
def _raycast_exhaustive(origins, dirs, tris, out_face, out_t, out_uv):
    for k in prange(origins.shape[0]):
        best = np.inf
        best_f = -1
        bu = bv = 0.0
        for f in range(tris.shape[0]):
            t, u, v = _ray_tri(origins[k, 0], origins[k, 1], origins[k, 2],
                               dirs[k, 0], dirs[k, 1], dirs[k, 2], tris[f, 0], tris[f, 1], tris[f, 2])
            if t < best:
                best, best_f, bu, bv = t, f, u, v
        out_face[k] = best_f
        out_t[k] = best
        out_uv[k, 0] = bu
        out_uv[k, 1] = bv


class MeshBVH:
    """Immutable BVH over a mesh's triangles; safe to query from many threads."""

    def __init__(self, mesh, leaf_size=BVH_LEAF_SIZE):
        if mesh.n_faces == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        self._tris = np.ascontiguousarray(mesh.triangles())
        self._nodes = _build_bvh(self._tris, leaf_size, _BOX_PAD)

    def closest_points(self, points, exhaustive=False):
        """Closest surface point of each query: (face, barycentric (N, 3), squared distance)."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        n = len(pts)
        face = np.empty(n, np.int64)
        bary = np.empty((n, 3))
        d2 = np.empty(n)
        if exhaustive:
            _closest_exhaustive(pts, self._tris, face, bary, d2)
        else:
            _closest_bvh(pts, self._tris, *self._nodes, face, bary, d2)
        return face, bary, d2

    def raycast(self, origins, directions, exhaustive=False):
        """First hit along each ray: (face or -1, t in units of the direction, barycentric).

        Hits are taken for t > 0 from either side of a triangle; equal t goes
        to the lowest face index.
        """
        d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
        o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
        o = np.ascontiguousarray(o)
        n = len(d)
        face = np.empty(n, np.int64)
        t = np.empty(n)
        uv = np.empty((n, 2))
        if exhaustive:
            _raycast_exhaustive(o, d, self._tris, face, t, uv)
        else:
            _raycast_bvh(o, d, self._tris, *self._nodes, face, t, uv)
        bary = np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)
        return face, t, bary
