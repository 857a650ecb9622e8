"""Deformation transfer from a tracked/canonical mesh pair onto point clouds.

Every scene point is attached to its closest point on the tracked mesh
surface and displaced by the deformation of that surface point, i.e. the
barycentric blend of the three vertex deformations of the attachment face.
Off-surface points are translated only; no rotation or normal extrapolation
is applied.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, backproject, _check_depth

INTERPOLATE = "interpolate"
NEAREST_VERTEX = "nearest_vertex"


class TopologyError(ValueError):
    """Tracked and canonical meshes do not share vertices/faces."""


@dataclass(eq=False)
class DeformationField:
    vectors: np.ndarray  # (V, 3), canonical - tracked

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.vectors).all():
            raise ValueError("deformation vectors must be finite")

    def __len__(self):
        return len(self.vectors)

    def to_raster(self):
        """(V, 1, 3) layout used for CFR1 serialisation."""
        return self.vectors[:, None, :]

    @classmethod
    def from_raster(cls, raster):
        r = np.asarray(raster)
        if r.ndim != 3 or r.shape[1] != 1 or r.shape[2] != 3:
            raise ValueError(f"deformation raster must be (V, 1, 3), got {r.shape}")
        return cls(r[:, 0, :].astype(np.float64))


@dataclass(frozen=True)
class SurfaceAttachment:
    face: int
    barycentric: tuple
    sq_distance: float


def per_vertex_deformation(tracked, canonical):
    if tracked.n_vertices != canonical.n_vertices or tracked.n_faces != canonical.n_faces:
        raise TopologyError(
            f"topology mismatch: tracked has {tracked.n_vertices} vertices / {tracked.n_faces} faces, "
            f"canonical has {canonical.n_vertices} vertices / {canonical.n_faces} faces")
    if not np.array_equal(tracked.faces, canonical.faces):
        bad = int(np.flatnonzero((tracked.faces != canonical.faces).any(axis=1))[0])
        raise TopologyError(f"topology mismatch: face lists differ, first at face {bad}")
    return DeformationField(canonical.vertices - tracked.vertices)


def _check_field(mesh, field):
    if len(field) != mesh.n_vertices:
        raise TopologyError(f"deformation field has {len(field)} vectors, mesh has "
                            f"{mesh.n_vertices} vertices")


def attach_points(mesh, points, exhaustive=False):
    """Vectorised :func:`attach_point`: (face, barycentric, squared distance) arrays."""
    if mesh.n_faces == 0:
        raise ValueError("cannot attach points to an empty mesh")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.empty(0, np.int64), np.empty((0, 3)), np.empty(0)
    return mesh.bvh.closest_points(pts, exhaustive=exhaustive)


def attach_point(mesh, point, exhaustive=False):
    face, bary, d2 = attach_points(mesh, np.asarray(point, dtype=np.float64).reshape(1, 3),
                                   exhaustive=exhaustive)
    return SurfaceAttachment(int(face[0]), tuple(float(b) for b in bary[0]), float(d2[0]))


def transfer_displacements(mesh, field, points, mode=INTERPOLATE):
    """Per-point displacement taken from the closest surface point of ``mesh``."""
    _check_field(mesh, field)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    face, bary, _ = attach_points(mesh, pts)
    corners = mesh.faces[face]
    if mode == INTERPOLATE:
        return np.einsum("nk,nkj->nj", bary, field.vectors[corners])
    if mode == NEAREST_VERTEX:
        # snap to the attachment face's corner closest to the point itself
        d2 = ((mesh.vertices[corners] - pts[:, None, :]) ** 2).sum(axis=2)
        pick = corners[np.arange(len(face)), np.argmin(d2, axis=1)]
        return field.vectors[pick]
    raise ValueError(f"unknown transfer mode {mode!r}")


def canonicalize_cloud(cloud, tracked, field, mode=INTERPOLATE):
    """Map a world-space cloud into canonical space; order and length are kept."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy(), cloud.pixels, cloud.colors, cloud.dropped)
    disp = transfer_displacements(tracked, field, cloud.points, mode)
    return PointCloud(cloud.points + disp, cloud.pixels, cloud.colors, cloud.dropped)


def bake_canonical_map(depth, mask, camera, tracked, field, mode=INTERPOLATE):
    """Per-pixel canonical coordinates; returns ((H, W, 3) map, mask).

    Pixels outside the mask or with nonpositive depth are zero with the mask
    bit cleared.
    """
    _check_depth(depth, camera, mask)
    _check_field(tracked, field)
    cloud = backproject(depth, camera, mask)
    canon = np.zeros(camera.shape + (3,))
    out_mask = np.zeros(camera.shape, dtype=bool)
    if len(cloud):
        c = canonicalize_cloud(cloud, tracked, field, mode)
        u, v = cloud.pixels[:, 0], cloud.pixels[:, 1]
        canon[v, u] = c.points
        out_mask[v, u] = True
    return canon, out_mask
