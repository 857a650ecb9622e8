"""Procedural blendshape-rig scenes with exact ground truth.

A subdivided icosphere stands in for a face model. Blendshape bases are
Gaussian bumps, frames pose the rig rigidly, and a ray-cast renderer keeps
the hit face and barycentric coordinates of every pixel so that depth,
canonical coordinates and correspondences are known exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Camera, PointCloud, _check_rotation, _pixel_rays_camera, look_at,
                       project, random_rotation)
from .matcher import DenseCorrespondence, TrackSet
from .meshes import TriMesh

SYNTH_VERSION = 1
DEFAULT_K = 8
DEFAULT_SUBDIVISIONS = 3
BUMP_AMPLITUDE = 0.15
BUMP_SIGMA = (0.3, 0.6)
N_RING_CAMERAS = 16
RING_DISTANCE = 3.5
FOCAL_PER_PIXEL = 150.0 / 128.0
VISIBILITY_TOL = 1e-4
NOISE_FREQ = 4.0


# -- rig ---------------------------------------------------------------------

def icosphere(subdivisions=DEFAULT_SUBDIVISIONS):
    """Unit icosphere: 20 * 4**subdivisions faces, outward winding."""
    p = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(int(subdivisions)):
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1)   # midpoints of edges 01, 12, 20 per face
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([np.stack([a, m[0], m[2]], 1), np.stack([b, m[1], m[0]], 1),
                            np.stack([c, m[2], m[1]], 1), np.stack([m[0], m[1], m[2]], 1)])
        v = np.concatenate([v, mid])
    return TriMesh(v, f)


@dataclass(eq=False)
class BlendshapeRig:
    neutral: TriMesh
    bases: np.ndarray   # (K, V, 3)
    seed: int

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.float64)
        if self.bases.ndim != 3 or self.bases.shape[1:] != (self.neutral.n_vertices, 3):
            raise ValueError(f"bases must be (K, {self.neutral.n_vertices}, 3), got {self.bases.shape}")

    @property
    def K(self):
        return len(self.bases)


def make_rig(seed=0, K=DEFAULT_K, subdivisions=DEFAULT_SUBDIVISIONS):
    """Icosphere rig with K Gaussian-bump bases (peak displacement 0.15 of the radius)."""
    K = int(K)
    if K < 1:
        raise ValueError(f"a rig needs at least one basis, got K={K}")
    neutral = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    v = neutral.vertices
    bases = np.empty((K, len(v), 3))
    for k in range(K):
        anchor = v[rng.integers(len(v))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        sigma = rng.uniform(*BUMP_SIGMA)
        d2 = ((v - anchor) ** 2).sum(axis=1)
        bases[k] = BUMP_AMPLITUDE * np.exp(-d2 / (2.0 * sigma * sigma))[:, None] * direction
    return BlendshapeRig(neutral, bases, int(seed))


@dataclass(eq=False)
class FrameParams:
    weights: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.rotation = _check_rotation(self.rotation, "pose rotation")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.weights).all() and np.isfinite(self.translation).all()):
            raise ValueError("frame parameters must be finite")

    @classmethod
    def neutral(cls, K):
        return cls(np.zeros(K))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], np.asarray(d["rotation"]).reshape(3, 3), d["translation"])


def random_params(rng, K, weight_scale=1.0, max_angle=0.15, max_translation=0.05):
    return FrameParams(rng.uniform(-weight_scale, weight_scale, size=K),
                       random_rotation(rng, max_angle),
                       rng.uniform(-max_translation, max_translation, size=3))


def pose_rig(rig, params):
    if len(params.weights) != rig.K:
        raise ValueError(f"expected {rig.K} blendshape weights, got {len(params.weights)}")
    local = rig.neutral.vertices + np.tensordot(params.weights, rig.bases, axes=1)
    return rig.neutral.with_vertices(local @ params.rotation.T + params.translation)


# -- cameras -------------------------------------------------------------------

def ring_cameras(n=N_RING_CAMERAS, size=128, distance=RING_DISTANCE, height=0.0):
    """``n`` cameras evenly spaced on a horizontal ring, all looking at the origin."""
    cams = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        eye = (distance * np.sin(a), height, distance * np.cos(a))
        cams.append(look_at(eye, (0.0, 0.0, 0.0), fx=FOCAL_PER_PIXEL * size, width=size, height=size))
    return cams


# -- texture -------------------------------------------------------------------

def _hash01(ix, iy, iz, seed):
    with np.errstate(over="ignore"):  # wrap-around is intended
        salt = np.uint64(seed) * np.uint64(0x27D4EB2F165667C5)
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ salt)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points, seed=0, freq=NOISE_FREQ):
    """Smooth 3-D value noise in [0, 1) (quintic-faded trilinear lattice)."""
    p = np.asarray(points, dtype=np.float64) * freq
    base = np.floor(p)
    t = p - base
    t = t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
    i = base.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1.0 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1.0 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1.0 - t[..., 2]
                out += wx * wy * wz * _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out


def texture(canon, seed=0):
    """RGB colour of canonical coordinates, two octaves per channel."""
    c = np.asarray(canon, dtype=np.float64)
    rgb = np.empty(c.shape[:-1] + (3,))
    for ch in range(3):
        s = 2 * ch + 7919 * seed
        rgb[..., ch] = 0.65 * value_noise(c, s) + 0.35 * value_noise(c, s + 1, 2.0 * NOISE_FREQ)
    return rgb


# -- rendering -------------------------------------------------------------------

@dataclass(eq=False)
class View:
    camera: Camera
    mesh: TriMesh          # posed mesh that was rendered
    depth: np.ndarray      # (H, W) z-depth, 0 on misses
    mask: np.ndarray       # (H, W) bool
    canon: np.ndarray      # (H, W, 3) neutral-mesh position of the hit, 0 on misses
    color: np.ndarray      # (H, W, 3) in [0, 1], 0 on misses
    face: np.ndarray       # (H, W) hit face, -1 on misses
    bary: np.ndarray       # (H, W, 3) barycentric of the hit


def _camera_rays(camera, x=None, y=None):
    # world directions with unit camera-z, so the hit parameter is the z-depth
    if x is None:
        d = _pixel_rays_camera(camera)
    else:
        d = np.stack([(np.asarray(x, np.float64) + 0.5 - camera.cx) / camera.fx,
                      (np.asarray(y, np.float64) + 0.5 - camera.cy) / camera.fy,
                      np.ones(np.shape(x))], axis=-1)
    return d @ camera.rotation.T


def render(mesh, neutral, camera, exhaustive=False, texture_seed=0):
    if not mesh.same_topology(neutral):
        raise ValueError("rendered mesh and neutral mesh must share topology")
    h, w = camera.shape
    dirs = _camera_rays(camera).reshape(-1, 3)
    face, t, bary = mesh.bvh.raycast(camera.center, dirs, exhaustive=exhaustive)
    hit = face >= 0
    canon = np.zeros((h * w, 3))
    canon[hit] = neutral.evaluate(face[hit], bary[hit])
    color = np.zeros((h * w, 3))
    color[hit] = texture(canon[hit], texture_seed)
    depth = np.where(hit, t, 0.0)
    bary = np.where(hit[:, None], bary, 0.0)
    return View(camera, mesh, depth.reshape(h, w), hit.reshape(h, w), canon.reshape(h, w, 3),
                color.reshape(h, w, 3), face.reshape(h, w), bary.reshape(h, w, 3))


@dataclass(eq=False)
class SceneSample:
    params: FrameParams
    mesh: TriMesh
    views: list


def render_scene(rig, params, cameras, texture_seed=0):
    mesh = pose_rig(rig, params)
    return SceneSample(params, mesh, [render(mesh, rig.neutral, c, texture_seed=texture_seed)
                                      for c in cameras])


def add_depth_noise(depth, mask, sigma, rng):
    """Gaussian z-depth noise on valid pixels; pixels pushed to <= 0 become invalid."""
    if sigma <= 0:
        return np.array(depth, dtype=np.float64), np.array(mask, dtype=bool)
    d = np.array(depth, dtype=np.float64)
    noise = rng.normal(0.0, sigma, size=d.shape)
    m = np.array(mask, dtype=bool)
    d[m] += noise[m]
    m &= d > 0
    d[~m] = 0.0
    return d, m


# -- ground truth -------------------------------------------------------------------

def _visible(mesh, camera, points):
    """Projection of world points into ``camera`` and whether nothing occludes them."""
    proj = project(points, camera)
    dirs = points - camera.center
    face, t, _ = mesh.bvh.raycast(camera.center, dirs)
    ok = proj.in_frustum & (face >= 0)
    ok &= np.abs(t - 1.0) * np.abs(proj.depth) <= VISIBILITY_TOL
    return proj.pixels - 0.5, ok


def gt_correspondence(view_a, view_b):
    """Sub-pixel position in ``view_b`` of the material point seen at each pixel of ``view_a``."""
    h, w = view_a.mask.shape
    target = np.zeros((h, w, 2))
    valid = np.zeros((h, w), bool)
    v, u = np.nonzero(view_a.mask)
    if len(u):
        pts = view_b.mesh.evaluate(view_a.face[v, u], view_a.bary[v, u])
        pix, ok = _visible(view_b.mesh, view_b.camera, pts)
        target[v[ok], u[ok]] = pix[ok]
        valid[v[ok], u[ok]] = True
    return DenseCorrespondence(target, np.zeros((h, w)), valid, view_b.mask.shape)


def gt_cycle_displacement(view_a, view_b):
    """Cycle error of the ground-truth field evaluated without resampling.

    Each forward target in ``view_b`` is ray-cast at its exact sub-pixel
    position and the hit material point is projected back into ``view_a``.
    Returns (displacement (H, W), valid (H, W)).
    """
    fwd = gt_correspondence(view_a, view_b)
    h, w = fwd.shape
    disp = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    v, u = np.nonzero(fwd.valid)
    if len(u):
        x, y = fwd.target[v, u, 0], fwd.target[v, u, 1]
        face, _, bary = view_b.mesh.bvh.raycast(view_b.camera.center, _camera_rays(view_b.camera, x, y))
        hit = face >= 0
        pts = view_a.mesh.evaluate(np.where(hit, face, 0), bary)
        pix, ok = _visible(view_a.mesh, view_a.camera, pts)
        ok &= hit
        d = np.hypot(pix[:, 0] - u, pix[:, 1] - v)
        disp[v[ok], u[ok]] = d[ok]
        valid[v[ok], u[ok]] = True
    return disp, valid


def gt_point_tracks(view_i, mesh_j):
    """World position on ``mesh_j`` of the material point at each pixel of ``view_i``."""
    h, w = view_i.mask.shape
    pts = np.zeros((h, w, 3))
    m = view_i.mask
    pts[m] = mesh_j.evaluate(view_i.face[m], view_i.bary[m])
    return pts, m.copy()


def gt_tracks(views, seeds):
    """Ground-truth :class:`TrackSet` of frame-0 seed pixels through ``views``."""
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    v0 = views[0]
    u, v = seeds[:, 0], seeds[:, 1]
    if not v0.mask[v, u].all():
        raise ValueError("every seed must be a valid pixel of frame 0")
    n_f, n_s = len(views), len(seeds)
    positions = np.zeros((n_f, n_s, 2))
    valid = np.zeros((n_f, n_s), bool)
    for f, view in enumerate(views):
        pts = view.mesh.evaluate(v0.face[v, u], v0.bary[v, u])
        pix, ok = _visible(view.mesh, view.camera, pts)
        positions[f][ok] = pix[ok]
        valid[f] = ok
    return TrackSet(seeds, v0.canon[v, u].copy(), positions, np.zeros((n_f, n_s)), valid)


def world_cloud(view):
    """Back-projection-free world points of a view (exact hits)."""
    m = view.mask
    v, u = np.nonzero(m)
    return PointCloud(view.mesh.evaluate(view.face[m], view.bary[m]), np.stack([u, v], 1))


# -- scene pairs -------------------------------------------------------------------

@dataclass(eq=False)
class ScenePair:
    rig: BlendshapeRig
    a: View
    b: View


def make_pair(seed, size=128, camera_step=1, K=DEFAULT_K, weight_scale=1.0):
    """Two frames of one rig seen from ring cameras ``camera_step`` apart."""
    rig = make_rig(seed, K)
    rng = np.random.default_rng([seed, 1])
    cams = ring_cameras(N_RING_CAMERAS, size)
    i = int(rng.integers(N_RING_CAMERAS))
    pa = random_params(rng, K, weight_scale)
    pb = random_params(rng, K, weight_scale)
    a = render(pose_rig(rig, pa), rig.neutral, cams[i])
    b = render(pose_rig(rig, pb), rig.neutral, cams[(i + camera_step) % N_RING_CAMERAS])
    return ScenePair(rig, a, b)


# -- timestamp selection -------------------------------------------------------------

def fps_select(vectors, k, seed_index=0, weights=None):
    """Greedy farthest-point sampling (Euclidean); ties go to the lowest index.

    ``weights`` optionally scales each parameter dimension before distances
    are taken, giving a weighted Euclidean metric.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (x.shape[1],) or (w < 0).any():
            raise ValueError(f"weights must be {x.shape[1]} nonnegative values")
        x = x * w
    n = len(x)
    k = int(k)
    if k < 0 or k > n:
        raise ValueError(f"cannot select {k} of {n} vectors")
    if k == 0:
        return []
    if not 0 <= seed_index < n:
        raise ValueError(f"seed index {seed_index} out of range for {n} vectors")
    chosen = [int(seed_index)]
    taken = np.zeros(n, bool)
    taken[seed_index] = True
    dmin = ((x - x[seed_index]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(np.where(taken, -np.inf, dmin)))
        chosen.append(nxt)
        taken[nxt] = True
        dmin = np.minimum(dmin, ((x - x[nxt]) ** 2).sum(axis=1))
    return chosen


@dataclass
class TimestampSelection:
    blend: list
    pose: list
    union: list
    duplicates: list

    @property
    def total(self):
        return len(self.blend) + len(self.pose)


def select_timestamps(blend_params, pose_params, n_blend=40, n_pose=10, seed_index=0,
                      blend_weights=None, pose_weights=None):
    b = np.asarray(blend_params, dtype=np.float64)
    p = np.asarray(pose_params, dtype=np.float64)
    if len(b) != len(p):
        raise ValueError(f"blendshape log has {len(b)} frames, pose log has {len(p)}")
    sb = fps_select(b, n_blend, seed_index, blend_weights) if n_blend else []
    sp = fps_select(p, n_pose, seed_index, pose_weights) if n_pose else []
    dup = sorted(set(sb) & set(sp))
    return TimestampSelection(sb, sp, sorted(set(sb) | set(sp)), dup)


def parameter_log(n_frames=200, K=DEFAULT_K, seed=0, smoothness=0.9):
    """Smooth random-walk blendshape (n, K) and pose (n, 6) parameter logs."""
    rng = np.random.default_rng(seed)
    blend = np.zeros((n_frames, K))
    pose = np.zeros((n_frames, 6))
    b = np.zeros(K)
    q = np.zeros(6)
    for t in range(n_frames):
        b = smoothness * b + rng.normal(0.0, 0.3, K)
        q = smoothness * q + rng.normal(0.0, [0.05, 0.05, 0.05, 0.02, 0.02, 0.02])
        blend[t] = b
        pose[t] = q
    return blend, pose


# -- sequences -------------------------------------------------------------------

@dataclass(eq=False)
class Sequence:
    rig: BlendshapeRig
    params: list      # FrameParams per frame
    cameras: list
    frames: list      # SceneSample per frame

    def view(self, frame, camera):
        return self.frames[frame].views[camera]


def make_sequence(seed=0, size=128, n_cameras=N_RING_CAMERAS, n_frames=1, K=DEFAULT_K,
                  subdivisions=DEFAULT_SUBDIVISIONS, weight_scale=1.0):
    """Deterministic multi-view, multi-frame scene; frame 0 is drawn like every other frame."""
    if n_frames < 1 or n_cameras < 1 or size < 1:
        raise ValueError("a sequence needs at least one frame, one camera and one pixel")
    rig = make_rig(seed, K, subdivisions)
    rng = np.random.default_rng([seed, 2])
    params = [random_params(rng, K, weight_scale) for _ in range(n_frames)]
    cams = ring_cameras(n_cameras, size)
    return Sequence(rig, params, cams, [render_scene(rig, p, cams) for p in params])


def benchmark_pair(size=518, seed=0, offset=(0.37, -0.61), off_surface=0.0):
    """Fully valid pair of canonical maps sampling one smooth surface.

    The target samples the surface on a grid shifted by ``offset`` pixels.
    ``off_surface`` adds that much height-field bias to the target (as a
    fraction of the surface amplitude) to emulate noisy predictions.
    """
    rng = np.random.default_rng(seed)
    k = rng.uniform(1.0, 3.0, size=3)
    step = 2.0 / size

    def surface(dx, dy, gain):
        s = (np.arange(size) + 0.5) * step - 1.0
        x, y = np.meshgrid(s + dx * step, s + dy * step)
        z = 0.2 * gain * (np.sin(k[0] * x) * np.cos(k[1] * y) + 0.5 * np.sin(k[2] * x * y))
        return np.stack([x, y, z], axis=-1)

    m = np.ones((size, size), bool)
    return surface(0.0, 0.0, 1.0), m, surface(offset[0], offset[1], 1.0 + off_surface), m.copy()
