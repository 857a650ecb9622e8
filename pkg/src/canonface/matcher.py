"""Dense correspondence and tracking by nearest-neighbour search in canonical space.

A source pixel p corresponds to the target pixel whose canonical coordinate
is closest to C_src(p) in Euclidean distance; at equal distance the target
pixel with the lowest row-major index wins. Correspondence targets are
stored in pixel-index coordinates (u = column, v = row).
"""

import json
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import DimensionError, sample_bilinear
from .kdtree import KDTree


class EmptyIndexError(ValueError):
    """No valid pixels to index."""


def _check_map(canon, mask, name="canonical map"):
    canon = np.asarray(canon)
    if canon.ndim != 3 or canon.shape[2] != 3:
        raise DimensionError(f"{name} must be (H, W, 3), got {canon.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != canon.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match {name} {canon.shape[:2]}")
    return canon, mask


@dataclass(eq=False)
class SpatialIndex:
    coords: np.ndarray   # (N, 3) canonical coordinates, row-major pixel order
    pixels: np.ndarray   # (N, 2) int (u, v)
    shape: tuple         # (H, W) of the indexed frame
    tree: KDTree

    def __len__(self):
        return len(self.coords)

    def query(self, points):
        """Nearest indexed pixel of each (M, 3) point: (pixels (M, 2), distances (M,))."""
        idx, dist = self.tree.query(points)
        return self.pixels[idx], dist


def build_index(canon, mask, stride=1):
    """KD-tree over the valid pixels of one frame (every ``stride``-th row and column)."""
    canon, mask = _check_map(canon, mask)
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    sel = mask
    if stride > 1:
        sel = np.zeros_like(mask)
        sel[::stride, ::stride] = mask[::stride, ::stride]
    v, u = np.nonzero(sel)
    if len(u) == 0:
        raise EmptyIndexError("no valid pixels to index")
    coords = np.ascontiguousarray(canon[v, u], dtype=np.float64)
    return SpatialIndex(coords, np.stack([u, v], axis=1), mask.shape, KDTree(coords))


@dataclass(eq=False)
class DenseCorrespondence:
    target: np.ndarray      # (H, W, 2) float (u, v) in the target frame; 0 where invalid
    distance: np.ndarray    # (H, W) canonical distance; 0 where invalid
    valid: np.ndarray       # (H, W) bool
    target_shape: tuple

    @property
    def shape(self):
        return self.valid.shape

    def to_raster(self):
        """(H, W, 3) float32 raster (target_u, target_v, distance) and the validity mask."""
        r = np.concatenate([self.target, self.distance[..., None]], axis=2).astype(np.float32)
        return r, self.valid.copy()

    @classmethod
    def from_raster(cls, raster, valid, target_shape=None):
        raster = np.asarray(raster, dtype=np.float64)
        if raster.ndim != 3 or raster.shape[2] != 3:
            raise DimensionError(f"correspondence raster must be (H, W, 3), got {raster.shape}")
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != raster.shape[:2]:
            raise DimensionError("correspondence mask does not match raster")
        return cls(raster[..., :2].copy(), raster[..., 2].copy(), valid,
                   tuple(target_shape) if target_shape is not None else raster.shape[:2])

    @classmethod
    def identity(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        h, w = mask.shape
        t = np.zeros((h, w, 2))
        t[..., 0] = np.arange(w)[None, :]
        t[..., 1] = np.arange(h)[:, None]
        t[~mask] = 0.0
        return cls(t, np.zeros((h, w)), mask.copy(), (h, w))


@njit(cache=True)
def _fill(idx, d2, pixels, max_d2, target, dist, ok):
    for r in range(idx.shape[0]):
        for c in range(idx.shape[1]):
            k = idx[r, c]
            if k >= 0 and d2[r, c] <= max_d2:
                target[r, c, 0] = pixels[k, 0]
                target[r, c, 1] = pixels[k, 1]
                dist[r, c] = np.sqrt(d2[r, c])
                ok[r, c] = True


def _to_correspondence(index, idx, d2, valid, max_distance):
    h, w = valid.shape
    target = np.zeros((h, w, 2))
    dist = np.zeros((h, w))
    ok = np.zeros((h, w), dtype=bool)
    max_d2 = np.inf if max_distance is None else float(max_distance) ** 2
    _fill(idx, d2, index.pixels, max_d2, target, dist, ok)
    return DenseCorrespondence(target, dist, ok & valid, index.shape)


def match_dense(source_canon, source_mask, index, max_distance=None):
    """Nearest target pixel in canonical space for every valid source pixel.

    ``max_distance`` optionally marks matches farther than it as invalid; no
    cutoff is applied by default.
    """
    src, mask = _check_map(source_canon, source_mask, "source canonical map")
    idx, d2 = index.tree.query_grid(src, mask)
    return _to_correspondence(index, idx, d2, mask, max_distance)


def match_dense_downsampled(source_canon, source_mask, target_canon, target_mask, stride,
                            max_distance=None):
    return match_dense(source_canon, source_mask, build_index(target_canon, target_mask, stride),
                       max_distance)


def match_dense_exhaustive(source_canon, source_mask, index, max_distance=None, chunk=256):
    """Linear-scan reference for :func:`match_dense` (same tie rule)."""
    src, mask = _check_map(source_canon, source_mask, "source canonical map")
    h, w = mask.shape
    idx = np.full((h, w), -1, np.int64)
    d2 = np.full((h, w), np.inf)
    v, u = np.nonzero(mask)
    q = src[v, u].astype(np.float64)
    t = index.coords
    for s in range(0, len(q), chunk):
        diff = t[None, :, :] - q[s:s + chunk, None, :]
        dd = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        k = np.argmin(dd, axis=1)  # first minimum = lowest row-major index
        idx[v[s:s + chunk], u[s:s + chunk]] = k
        d2[v[s:s + chunk], u[s:s + chunk]] = dd[np.arange(len(k)), k]
    return _to_correspondence(index, idx, d2, mask, max_distance)


@dataclass(eq=False)
class TrackSet:
    seeds: np.ndarray       # (S, 2) int (u, v) in frame 0
    anchors: np.ndarray     # (S, 3) frame-0 canonical coordinates of the seeds
    positions: np.ndarray   # (F, S, 2) tracked (u, v) per frame
    distances: np.ndarray   # (F, S)
    valid: np.ndarray       # (F, S) bool

    @property
    def n_frames(self):
        return self.positions.shape[0]

    def to_json(self):
        return {
            "seeds": self.seeds.tolist(),
            "anchors": self.anchors.tolist(),
            "frames": [
                {"positions": self.positions[f].tolist(),
                 "distances": self.distances[f].tolist(),
                 "valid": self.valid[f].tolist()}
                for f in range(self.n_frames)
            ],
        }

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d):
        frames = d["frames"]
        s = len(d["seeds"])
        return cls(np.asarray(d["seeds"], dtype=np.int64).reshape(s, 2),
                   np.asarray(d["anchors"], dtype=np.float64).reshape(s, 3),
                   np.asarray([f["positions"] for f in frames], dtype=np.float64).reshape(-1, s, 2),
                   np.asarray([f["distances"] for f in frames], dtype=np.float64).reshape(-1, s),
                   np.asarray([f["valid"] for f in frames], dtype=bool).reshape(-1, s))


def track(seeds, sequence, max_distance=None):
    """Track seed pixels of frame 0 through ``sequence`` of (canonical map, mask).

    Every frame is matched independently against the frame-0 anchor
    coordinates, so per-frame results do not depend on processing order.
    Frames without valid pixels yield invalid track points.
    """
    sequence = list(sequence)
    if not sequence:
        raise ValueError("cannot track through an empty sequence")
    canon0, mask0 = _check_map(*sequence[0], name="frame 0 canonical map")
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    h, w = mask0.shape
    u, v = seeds[:, 0], seeds[:, 1]
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not inside.all():
        raise ValueError(f"seed {seeds[~inside][0].tolist()} lies outside frame 0")
    if not mask0[v, u].all():
        bad = seeds[~mask0[v, u]][0].tolist()
        raise ValueError(f"seed {bad} is not a valid pixel of frame 0")
    anchors = np.asarray(canon0[v, u], dtype=np.float64)
    n_f, n_s = len(sequence), len(seeds)
    positions = np.zeros((n_f, n_s, 2))
    distances = np.zeros((n_f, n_s))
    valid = np.zeros((n_f, n_s), dtype=bool)
    for f, (canon, mask) in enumerate(sequence):
        canon, mask = _check_map(canon, mask, f"frame {f} canonical map")
        if n_s == 0 or not mask.any():
            continue
        pix, dist = build_index(canon, mask).query(anchors)
        ok = np.ones(n_s, dtype=bool) if max_distance is None else dist <= max_distance
        positions[f][ok] = pix[ok]
        distances[f][ok] = dist[ok]
        valid[f] = ok
    return TrackSet(seeds, anchors, positions, distances, valid)


def cycle(forward, backward):
    """Forward-backward displacement |back(fwd(p)) - p| in pixels; returns (map, valid).

    The backward field is sampled bilinearly at the forward target, which is
    an exact lookup for integer targets; every tap with nonzero weight must
    be valid in the backward field.
    """
    if forward.target_shape != backward.shape:
        raise DimensionError(f"forward targets live in {forward.target_shape}, backward field "
                             f"is {backward.shape}")
    h, w = forward.shape
    back, ok = sample_bilinear(backward.target, backward.valid,
                               forward.target[..., 0], forward.target[..., 1])
    ok &= forward.valid
    gu, gv = np.meshgrid(np.arange(w), np.arange(h))
    disp = np.hypot(back[..., 0] - gu, back[..., 1] - gv)
    disp[~ok] = 0.0
    return disp, ok
