"""Pinhole cameras, ray maps, depth back-projection and point-cloud scaling.

Conventions used throughout the package:

* ``Camera.rotation`` maps camera axes to world axes (world-from-camera) and
  ``Camera.center`` is the camera position in world units. Camera axes are
  x right, y down, z forward.
* Depth maps hold z-depth (distance along the optical axis), not ray length.
* The centre of pixel (u, v) sits at continuous image coordinate
  (u + 0.5, v + 0.5). :func:`project` returns continuous coordinates; dense
  correspondence fields store pixel-index coordinates (centre of pixel
  (u, v) is (u, v)).
* Rasters are numpy arrays shaped (H, W) or (H, W, C); masks are boolean
  (H, W) arrays.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

CAMERA_CONVENTION = "world_from_camera,z_depth,half_pixel"
ROTATION_TOL = 1e-9


class DimensionError(ValueError):
    """Raster, mask or camera shapes disagree."""


def _check_rotation(R, name="rotation", tol=ROTATION_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.isfinite(R).all():
        raise ValueError(f"{name} must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"{name} is not a proper rotation (orthonormal, det +1)")
    return R


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    center: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.isfinite(c).all():
            raise ValueError("camera center must be finite")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"image size must be >= 1x1, got {self.width}x{self.height}")
        R = R.copy()
        R.flags.writeable = False
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def intrinsics(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.center

    def transformed(self, R, t):
        """The same camera after applying the rigid map x -> R x + t to the world."""
        R = _check_rotation(R)
        return Camera(self.fx, self.fy, self.cx, self.cy, R @ self.rotation,
                      R @ self.center + np.asarray(t, dtype=np.float64), self.width, self.height)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "center": [float(v) for v in self.center],
            "width": self.width, "height": self.height,
            "convention": CAMERA_CONVENTION,
        }

    @classmethod
    def from_dict(cls, d):
        conv = d.get("convention", CAMERA_CONVENTION)
        if conv != CAMERA_CONVENTION:
            raise ValueError(f"unsupported camera convention {conv!r}")
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["center"], dtype=np.float64), d["width"], d["height"])


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height, cx=None, cy=None):
    """Camera at ``eye`` whose optical axis points at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image; since camera y points down, the camera's y axis is aligned with -up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    x /= n
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    fy = fx if fy is None else fy
    cx = width / 2.0 if cx is None else cx
    cy = height / 2.0 if cy is None else cy
    return Camera(fx, fy, cx, cy, R, eye, width, height)


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    return rotation_from_axis_angle(axis, rng.uniform(0.0, max_angle))


def _pixel_rays_camera(camera):
    # unnormalised camera-frame directions with unit z through pixel centres
    u = (np.arange(camera.width, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(camera.height, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    d = np.empty((camera.height, camera.width, 3))
    d[..., 0] = u[None, :]
    d[..., 1] = v[:, None]
    d[..., 2] = 1.0
    return d


def ray_map(camera):
    """Unit world-space ray direction through every pixel centre, (H, W, 3)."""
    d = _pixel_rays_camera(camera)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera.rotation.T


def _check_depth(depth, camera, mask=None):
    depth = np.asarray(depth)
    if depth.ndim == 3 and depth.shape[2] == 1:
        depth = depth[..., 0]
    if depth.shape != camera.shape:
        raise DimensionError(f"depth is {depth.shape}, camera expects {camera.shape}")
    if mask is None:
        mask = np.ones(camera.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != camera.shape:
        raise DimensionError(f"mask is {mask.shape}, camera expects {camera.shape}")
    return depth.astype(np.float64), mask


def point_map(depth, camera):
    """World position of every pixel for the given z-depth map, (H, W, 3).

    No validity handling; see :func:`backproject` for the masked version.
    """
    depth, _ = _check_depth(depth, camera)
    return (_pixel_rays_camera(camera) * depth[..., None]) @ camera.rotation.T + camera.center


@dataclass
class PointCloud:
    points: np.ndarray
    pixels: Optional[np.ndarray] = None   # (N, 2) int (u, v) of the source pixel
    colors: Optional[np.ndarray] = None   # (N, 3) uint8
    dropped: int = 0                      # valid pixels discarded for nonpositive depth

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        n = len(self.points)
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
            if len(self.pixels) != n:
                raise ValueError("pixels must have one row per point")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != n:
                raise ValueError("colors must have one row per point")

    def __len__(self):
        return len(self.points)


def backproject(depth, camera, mask=None):
    """Lift valid pixels with positive z-depth to world points."""
    depth, mask = _check_depth(depth, camera, mask)
    keep = mask & (depth > 0) & np.isfinite(depth)
    dropped = int(np.count_nonzero(mask & ~keep))
    v, u = np.nonzero(keep)
    d = np.stack([(u + 0.5 - camera.cx) / camera.fx, (v + 0.5 - camera.cy) / camera.fy,
                  np.ones(len(u))], axis=1) * depth[v, u][:, None]
    pts = d @ camera.rotation.T + camera.center
    return PointCloud(pts, pixels=np.stack([u, v], axis=1), dropped=dropped)


class Projection(NamedTuple):
    pixels: np.ndarray      # (N, 2) continuous image coordinates (x, y)
    depth: np.ndarray       # (N,) z-depth
    in_frustum: np.ndarray  # (N,) bool


def project(cloud, camera):
    """Pinhole projection; points behind the camera are flagged, not dropped."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pc = camera.world_to_camera(pts.reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.fx * pc[:, 0] / z + camera.cx
        y = camera.fy * pc[:, 1] / z + camera.cy
    ok = (z > 0) & (x >= 0) & (x < camera.width) & (y >= 0) & (y < camera.height)
    return Projection(np.stack([x, y], axis=1), z, ok)


def normalization_scale(points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot normalise an empty point set")
    scale = float(np.mean(np.linalg.norm(pts, axis=1)))
    if not scale > 0:
        raise ValueError("all points are at the origin; normalisation scale is undefined")
    return scale


def normalize_cloud(cloud):
    """Scale a cloud so that the mean point norm is 1; returns (cloud, scale)."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    s = normalization_scale(cloud.points)
    return PointCloud(cloud.points / s, cloud.pixels, cloud.colors, cloud.dropped), s


def sample_bilinear(image, valid, x, y):
    """Bilinearly sample ``image`` (H, W[, C]) at pixel-index coords ``x``, ``y``.

    Only taps with nonzero weight must be valid and in range; returns
    (values, ok). Integer coordinates therefore reduce to an exact lookup.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    finite = np.isfinite(x) & np.isfinite(y)
    xs = np.where(finite, x, -1.0)
    ys = np.where(finite, y, -1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out_shape = x.shape + image.shape[2:]
    acc = np.zeros(out_shape, dtype=np.float64)
    ok = finite.copy()
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
        used = wgt != 0
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        tap_ok = inside & valid[yc, xc]
        ok &= ~used | tap_ok
        vals = image[yc, xc].astype(np.float64)
        if vals.ndim > wgt.ndim:
            acc += np.where(used & tap_ok, wgt, 0.0)[..., None] * vals
        else:
            acc += np.where(used & tap_ok, wgt, 0.0) * vals
    return acc, ok
