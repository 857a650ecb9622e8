"""Evaluation metrics for depth, correspondences, tracking and surfaces.

All metrics report raw values. Table-style scaling (x10, x100) is applied
only when formatting a :class:`MetricReport`.
"""

import csv
import io as _io
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import DimensionError, PointCloud, _check_rotation, sample_bilinear
from .kdtree import KDTree
from .matcher import cycle
from .meshes import TriMesh

DEFAULT_THRESHOLDS = (3, 5, 10)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EPE3D_CONVENTION = ("P_i(t_j): pixels valid in frame i; t_i uses frame i's own point map, "
                    "t_j (j != i) the frame-j point at the predicted correspondence of each pixel; "
                    "error = mean Euclidean distance to the ground-truth position of the same "
                    "material point at time j; margin EPE = mean of the four cells over all frame "
                    "pairs (t, t + margin); range EPE = mean of margin EPEs")


class MetricError(ValueError):
    """Nothing to evaluate, or inputs violate a metric's preconditions."""


# -- depth ---------------------------------------------------------------------

class DepthMetrics(NamedTuple):
    rmse: float
    absrel: float
    count: int


def depth_metrics(pred, gt, mask=None, align="none"):
    """RMSE and AbsRel over valid pixels; ``align="median"`` rescales pred first."""
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    gt = np.asarray(gt, dtype=np.float64).squeeze()
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise DimensionError(f"mask {mask.shape} does not match depth {gt.shape}")
    n = int(mask.sum())
    if n == 0:
        raise MetricError("empty evaluation mask")
    g = gt[mask]
    p = pred[mask]
    if not (g > 0).all():
        raise MetricError("ground-truth depth must be > 0 on valid pixels")
    if align == "median":
        p = p * (np.median(g) / np.median(p))
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    d = p - g
    return DepthMetrics(float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d) / g)), n)


# -- 2-D correspondences --------------------------------------------------------

class EPEResult(NamedTuple):
    mean: float
    rates: dict
    count: int


def epe2d(pred, gt, thresholds=DEFAULT_THRESHOLDS):
    if pred.shape != gt.shape:
        raise DimensionError(f"correspondence fields differ: {pred.shape} vs {gt.shape}")
    ok = pred.valid & gt.valid
    n = int(ok.sum())
    if n == 0:
        raise MetricError("no pixel is valid in both correspondence fields")
    err = np.linalg.norm(pred.target[ok] - gt.target[ok], axis=1)
    rates = {t: float(np.mean(err < t)) for t in thresholds}
    return EPEResult(float(err.mean()), rates, n)


class CCEResult(NamedTuple):
    mean: float
    median: float
    rate_lt_2px: float
    count: int


def cce_stats(disp, valid, threshold=2.0):
    d = np.asarray(disp, dtype=np.float64)[np.asarray(valid, dtype=bool)]
    if d.size == 0:
        raise MetricError("no pixel survives the forward-backward cycle")
    return CCEResult(float(d.mean()), float(np.median(d)), float(np.mean(d < threshold)), int(d.size))


def cce(forward, backward, threshold=2.0):
    disp, ok = cycle(forward, backward)
    return cce_stats(disp, ok, threshold)


# -- 3-D correspondences ---------------------------------------------------------

def _sample_points(points, mask, target, valid):
    vals, ok = sample_bilinear(points, mask, target[..., 0], target[..., 1])
    return vals, ok & valid


def epe3d_grid(pred_points, pred_masks, corr, gt_tracks):
    """P_i(t_j) errors for one frame pair.

    pred_points, pred_masks: two (H, W, 3) point maps and (H, W) masks.
    corr: {(0, 1): field 0->1, (1, 0): field 1->0} predicted correspondences.
    gt_tracks: {(i, j): ((H, W, 3) positions, (H, W) mask)} ground-truth
    position at time j of the material point seen at each pixel of frame i.
    Returns ({"P0(t0)": ..., ...}, {key: count}).
    """
    if len(pred_points) != 2 or len(pred_masks) != 2:
        raise MetricError("epe3d_grid needs exactly two predicted frames")
    values, counts = {}, {}
    for i in (0, 1):
        for j in (0, 1):
            if (i, j) not in gt_tracks:
                raise MetricError(f"missing ground truth for P{i}(t{j})")
            gpts, gmask = gt_tracks[(i, j)]
            gpts = np.asarray(gpts, dtype=np.float64)
            if gpts.shape != np.shape(pred_points[i]):
                raise DimensionError(f"P{i}(t{j}): ground truth {gpts.shape} vs prediction "
                                     f"{np.shape(pred_points[i])}")
            if i == j:
                p = np.asarray(pred_points[i], dtype=np.float64)
                ok = np.asarray(pred_masks[i], bool) & np.asarray(gmask, bool)
            else:
                c = corr[(i, j)]
                p, ok = _sample_points(np.asarray(pred_points[j], dtype=np.float64),
                                       np.asarray(pred_masks[j], bool), c.target, c.valid)
                ok &= np.asarray(pred_masks[i], bool) & np.asarray(gmask, bool)
            n = int(ok.sum())
            if n == 0:
                raise MetricError(f"P{i}(t{j}) has no evaluable pixels")
            key = f"P{i}(t{j})"
            values[key] = float(np.linalg.norm(p[ok] - gpts[ok], axis=1).mean())
            counts[key] = n
    return values, counts


def epe3d_margins(pred_points, pred_masks, corr, gt_tracks, margins):
    """Margin-averaged grids over a sequence.

    ``corr[(a, b)]`` and ``gt_tracks[(a, b)]`` are keyed by absolute frame
    indices. Returns {margin: grid dict with an extra "EPE" entry} plus a
    "range" entry averaging EPE over all requested margins.
    """
    n_frames = len(pred_points)
    if len(pred_masks) != n_frames:
        raise MetricError("frame counts of point maps and masks differ")
    out = {}
    for m in margins:
        pairs = [(t, t + m) for t in range(n_frames - m)]
        if not pairs:
            raise MetricError(f"margin {m} exceeds sequence length {n_frames}")
        cells = {}
        for a, b in pairs:
            sub_corr = {(0, 1): corr[(a, b)], (1, 0): corr[(b, a)]}
            sub_gt = {(i, j): gt_tracks[((a, b)[i], (a, b)[j])] for i in (0, 1) for j in (0, 1)}
            vals, _ = epe3d_grid([pred_points[a], pred_points[b]], [pred_masks[a], pred_masks[b]],
                                 sub_corr, sub_gt)
            for k, v in vals.items():
                cells.setdefault(k, []).append(v)
        grid = {k: float(np.mean(v)) for k, v in cells.items()}
        grid["EPE"] = float(np.mean(list(grid.values())))
        out[m] = grid
    out["range"] = float(np.mean([out[m]["EPE"] for m in margins]))
    return out


# -- photometric -------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, k):
    # separable 'valid' correlation over the first two axes
    n = len(k)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ k


def ssim(img1, img2, mask=None, window=SSIM_WINDOW, sigma=SSIM_SIGMA, data_range=1.0):
    """Mean SSIM over all windows lying fully inside ``mask``; returns (value, window count)."""
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"images differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < window or w < window:
        return float("nan"), 0
    mask = np.ones((h, w), bool) if mask is None else np.asarray(mask, dtype=bool)
    full = np.lib.stride_tricks.sliding_window_view(mask, (window, window)).all(axis=(2, 3))
    n_win = int(full.sum())
    if n_win == 0:
        return float("nan"), 0
    k = gaussian_window(window, sigma)
    a = np.where(mask[..., None], a, 0.0)
    b = np.where(mask[..., None], b, 0.0)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    s_aa = _filter_valid(a * a, k) - mu_a * mu_a
    s_bb = _filter_valid(b * b, k) - mu_b * mu_b
    s_ab = _filter_valid(a * b, k) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2))
    return float(smap[full].mean()), n_win


class WPEResult(NamedTuple):
    l1: float
    grad: float
    ssim: float
    count: int
    excluded: int
    grad_count: int
    ssim_count: int


def warp(target_img, corr):
    """Sample ``target_img`` at each base pixel's corresponding position; (image, ok)."""
    img = np.asarray(target_img, dtype=np.float64)
    allv = np.ones(img.shape[:2], bool)
    vals, ok = sample_bilinear(img, allv, corr.target[..., 0], corr.target[..., 1])
    return vals, ok & corr.valid


def wpe(base_img, target_img, corr):
    """Warping photometric error of target -> base: (L1, gradient L1, SSIM).

    Correspondences that land outside the target image are excluded and
    counted in ``excluded``.
    """
    base = np.asarray(base_img, dtype=np.float64)
    if base.ndim == 2:
        base = base[..., None]
    if base.shape[:2] != corr.shape:
        raise DimensionError(f"base image {base.shape[:2]} vs correspondence field {corr.shape}")
    warped, ok = warp(target_img, corr)
    if warped.ndim == 2:
        warped = warped[..., None]
    excluded = int((corr.valid & ~ok).sum())
    n = int(ok.sum())
    if n == 0:
        raise MetricError("no correspondence lands inside the target image")
    l1 = float(np.abs(warped - base)[ok].mean())
    px = ok[:, 1:] & ok[:, :-1]
    py = ok[1:, :] & ok[:-1, :]
    gx = np.abs((warped[:, 1:] - warped[:, :-1]) - (base[:, 1:] - base[:, :-1]))[px]
    gy = np.abs((warped[1:, :] - warped[:-1, :]) - (base[1:, :] - base[:-1, :]))[py]
    g = np.concatenate([gx.ravel(), gy.ravel()])
    grad = float(g.mean()) if g.size else float("nan")
    s, n_win = ssim(warped, base, ok)
    return WPEResult(l1, grad, s, n, excluded, int(px.sum() + py.sum()), n_win)


# -- surfaces ---------------------------------------------------------------------

def chamfer_cd_l1(gt_points, pred_surface, per_coordinate=False):
    """Mean distance from each ground-truth point to the predicted surface.

    ``pred_surface`` is a :class:`TriMesh` (point-to-triangle) or a point set
    (point-to-point). With ``per_coordinate`` the residual to the closest
    point is measured as |dx| + |dy| + |dz| instead of its Euclidean length.
    """
    g = gt_points.points if isinstance(gt_points, PointCloud) else np.asarray(gt_points, np.float64)
    g = g.reshape(-1, 3)
    if len(g) == 0:
        raise MetricError("no ground-truth points")
    if isinstance(pred_surface, TriMesh):
        if pred_surface.n_faces == 0:
            raise MetricError("predicted mesh has no faces")
        face, bary, d2 = pred_surface.bvh.closest_points(g)
        if not per_coordinate:
            return float(np.sqrt(d2).mean())
        q = pred_surface.evaluate(face, bary)
        return float(np.abs(q - g).sum(axis=1).mean())
    p = pred_surface.points if isinstance(pred_surface, PointCloud) else np.asarray(pred_surface)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise MetricError("no predicted points")
    idx, dist = KDTree(p).query(g)
    if not per_coordinate:
        return float(dist.mean())
    return float(np.abs(p[idx] - g).sum(axis=1).mean())


# -- cameras ----------------------------------------------------------------------

def rotation_error_deg(pred_R, gt_R, tol=1e-6):
    """Geodesic angle between two rotations in degrees.

    Evaluated as atan2(sin, cos) of the relative rotation, which equals the
    clamped arccos((trace - 1) / 2) but stays accurate near 0 and 180 degrees.
    """
    a = _check_rotation(pred_R, "predicted rotation", tol)
    b = _check_rotation(gt_R, "ground-truth rotation", tol)
    m = a.T @ b
    c = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


# -- reports ----------------------------------------------------------------------

@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def add(self, key, value, count):
        if count <= 0:
            raise MetricError(f"metric {key!r} has no supporting samples")
        self.values[key] = float(value)
        self.counts[key] = int(count)

    def scaled(self, factor):
        """Values multiplied by ``factor`` (rates and SSIM are left as they are)."""
        keep = {k for k in self.values if k.startswith("pct_") or "ssim" in k or k.endswith("_lt_2px")}
        return {k: (v if k in keep else v * factor) for k, v in self.values.items()}

    def to_json(self, scale=1):
        return {"values": self.scaled(scale) if scale != 1 else dict(self.values),
                "counts": dict(self.counts), "header": dict(self.header, scale=scale)}

    def dumps(self, scale=1):
        return json.dumps(self.to_json(scale), indent=2, sort_keys=True) + "\n"

    def to_csv(self, scale=1):
        vals = self.scaled(scale) if scale != 1 else self.values
        keys = sorted(vals)
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        writer.writerow([repr(vals[k]) for k in keys])
        return buf.getvalue()
