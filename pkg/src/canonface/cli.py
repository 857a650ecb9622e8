"""Command-line pipeline: ``canonface <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Every subcommand stages its outputs in a temporary directory next
to ``--output`` and moves them into place only after everything succeeded.
"""

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import _threads
from . import canonicalizer as cz
from . import io as cio
from . import losses, matcher, metrics, synth
from .geometry import CAMERA_CONVENTION, PointCloud, normalization_scale, point_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3

# heatmap colour ramp: value/vmax -> RGB, piecewise linear between these stops
RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
RAMP_COLORS = np.array([[0, 0, 0], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]],
                       dtype=np.float64)
INVALID_COLOR = (64, 64, 64)


class UsageError(Exception):
    pass


class DataError(ValueError):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr)


# -- helpers ----------------------------------------------------------------------

@contextmanager
def staged_output(out):
    """Yield a staging directory whose files are moved into ``out`` on success."""
    out = Path(out)
    parent = out.parent
    if out.exists() and not out.is_dir():
        raise DataError(f"output {out} exists and is not a directory")
    if not parent.is_dir():
        raise DataError(f"cannot create output {out}: parent directory {parent} does not exist")
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", suffix=".staging", dir=parent))
    try:
        yield stage
        out.mkdir(exist_ok=True)
        for src in sorted(stage.rglob("*")):
            dst = out / src.relative_to(stage)
            if src.is_dir():
                dst.mkdir(exist_ok=True)
            else:
                os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from None


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise UsageError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _need(path, what):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing {what}: {p}")
    return p


def _raster(path, what, channels=None):
    r = cio.read_raster(_need(path, what))
    if channels is not None and r.shape[2] != channels:
        raise DataError(f"{what} {path} has {r.shape[2]} channels, expected {channels}")
    return r.astype(np.float64) if r.dtype != np.uint8 else r


def _mask(path, what, shape=None):
    m = cio.read_mask(_need(path, what))
    if shape is not None and m.shape != tuple(shape):
        raise DataError(f"{what} {path} is {m.shape}, expected {tuple(shape)}")
    return m


def _optional_mask(path, shape, what):
    if path is None or not Path(path).is_file():
        _log(f"warning: no {what} found, every pixel is treated as valid")
        return np.ones(shape, bool)
    return _mask(path, what, shape)


def colorize(values, valid=None, vmax=None):
    """Map a 2-D array onto the fixed ramp; invalid pixels are dark grey."""
    v = np.asarray(values, dtype=np.float64)
    valid = np.ones(v.shape, bool) if valid is None else np.asarray(valid, bool)
    if vmax is None:
        vmax = float(v[valid].max()) if valid.any() else 0.0
    x = np.clip(v / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(v)
    rgb = np.stack([np.interp(x, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[~valid] = INVALID_COLOR
    return rgb


def _report_out(stage, report, scale):
    (stage / "report.json").write_text(report.dumps(scale))
    (stage / "report.csv").write_text(report.to_csv(scale))


# -- synth --------------------------------------------------------------------------

def view_name(frame, camera):
    return f"f{frame:03d}_c{camera:02d}"


def _scene_kwargs(m):
    return dict(seed=m["seed"], size=m["size"], n_cameras=m["n_cameras"], n_frames=m["n_frames"],
                K=m["K"], subdivisions=m["subdivisions"], weight_scale=m["weight_scale"])


def load_sequence(scene_dir):
    """Regenerate the exact scene described by a synth manifest."""
    m = cio.read_json(_need(Path(scene_dir) / "manifest.json", "scene manifest"))
    return m, synth.make_sequence(**_scene_kwargs(m))


def _track_seeds(mask, n):
    v, u = np.nonzero(mask)
    if len(u) == 0:
        raise DataError("frame 0 has no valid pixels to seed tracks")
    pick = np.linspace(0, len(u) - 1, min(n, len(u))).round().astype(np.int64)
    return np.stack([u[pick], v[pick]], axis=1)


def cmd_synth(args):
    if args.size < 8 or args.cameras < 1 or args.frames < 1:
        raise UsageError("--size must be >= 8 and --cameras/--frames >= 1")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    kw = dict(seed=args.seed, size=args.size, n_cameras=args.cameras, n_frames=args.frames,
              K=args.K, subdivisions=args.subdivisions, weight_scale=args.weight_scale)
    with staged_output(args.output) as st:
        seq = synth.make_sequence(**kw)
        rng = np.random.default_rng([args.seed, 3])
        for d in ("cameras", "depth", "mask", "canon", "rgb", "meshes", "params", "gt_corr"):
            (st / d).mkdir()
        for c, cam in enumerate(seq.cameras):
            cio.write_camera(st / "cameras" / f"c{c:02d}.json", cam)
        views, pairs, linked = [], [], set()
        for f, sample in enumerate(seq.frames):
            cio.write_obj(st / "meshes" / f"f{f:03d}.obj", sample.mesh)
            cio.write_json(st / "params" / f"f{f:03d}.json", sample.params.to_dict())
            for c, view in enumerate(sample.views):
                name = view_name(f, c)
                depth, mask = synth.add_depth_noise(view.depth, view.mask, args.noise, rng)
                cio.write_raster(st / "depth" / f"{name}.cfr1", depth)
                cio.write_mask(st / "mask" / f"{name}.cfr1", mask)
                cio.write_raster(st / "canon" / f"{name}.cfr1", view.canon)
                cio.write_raster(st / "rgb" / f"{name}.cfr1", view.color)
                views.append({"name": name, "frame": f, "camera": c,
                              "mesh": f"meshes/f{f:03d}.obj", "camera_file": f"cameras/c{c:02d}.json"})
                nbrs = []
                if args.cameras > 1:
                    nbrs.append((f, (c + 1) % args.cameras))
                if f + 1 < args.frames:
                    nbrs.append((f + 1, c))
                for g, d in nbrs:
                    if (g, d) == (f, c) or frozenset([(f, c), (g, d)]) in linked:
                        continue
                    linked.add(frozenset([(f, c), (g, d)]))
                    other = seq.view(g, d)
                    for src, dst, a, b in ((name, view_name(g, d), view, other),
                                           (view_name(g, d), name, other, view)):
                        corr = synth.gt_correspondence(a, b)
                        r, m = corr.to_raster()
                        cio.write_raster(st / "gt_corr" / f"{src}__{dst}.cfr1", r)
                        cio.write_mask(st / "gt_corr" / f"{src}__{dst}.mask.cfr1", m)
                        pairs.append([src, dst])
        cio.write_obj(st / "mesh.obj", seq.frames[0].mesh)
        cio.write_obj(st / "neutral.obj", seq.rig.neutral)
        if args.frames > 1:
            track_views = [seq.view(f, 0) for f in range(args.frames)]
            seeds = _track_seeds(track_views[0].mask, args.n_seeds)
            cio.write_json(st / "gt_tracks.json", synth.gt_tracks(track_views, seeds).to_json())
        manifest = {
            "format": {"raster": "CFR1", "mesh": "OBJ", "synth_version": synth.SYNTH_VERSION,
                       "camera_convention": CAMERA_CONVENTION},
            "seed": args.seed, "size": args.size, "n_cameras": args.cameras,
            "n_frames": args.frames, "K": args.K, "subdivisions": args.subdivisions,
            "weight_scale": args.weight_scale, "noise_sigma": args.noise,
            "views": views, "gt_pairs": sorted(pairs),
        }
        cio.write_json(st / "manifest.json", manifest)
    _log(f"wrote {len(views)} views to {args.output}")
    return EXIT_OK


# -- canonicalize ---------------------------------------------------------------------

def _canon_jobs(args):
    if args.depth:
        for flag in ("camera", "tracked", "canonical"):
            if getattr(args, flag) is None:
                raise UsageError(f"--depth requires --{flag}")
        return [{"name": args.name, "depth": args.depth, "mask": args.mask, "camera": args.camera,
                 "tracked": args.tracked, "gt": None}]
    if not args.input:
        raise UsageError("give either --input SCENE_DIR or --depth/--camera/--tracked/--canonical")
    root = Path(args.input)
    manifest = cio.read_json(_need(root / "manifest.json", "scene manifest"))
    wanted = set(args.views.split(",")) if args.views else None
    jobs = []
    for v in manifest["views"]:
        if wanted and v["name"] not in wanted:
            continue
        jobs.append({"name": v["name"], "depth": root / "depth" / f"{v['name']}.cfr1",
                     "mask": root / "mask" / f"{v['name']}.cfr1", "camera": root / v["camera_file"],
                     "tracked": args.tracked or root / v["mesh"],
                     "gt": root / "canon" / f"{v['name']}.cfr1"})
    if wanted and len(jobs) != len(wanted):
        missing = sorted(wanted - {j["name"] for j in jobs})
        raise DataError(f"views not in manifest: {', '.join(missing)}")
    args.canonical = args.canonical or root / "neutral.obj"
    return jobs


def cmd_canonicalize(args):
    jobs = _canon_jobs(args)
    canonical = cio.read_obj(_need(args.canonical, "canonical mesh"))
    mode = {"interpolate": cz.INTERPOLATE, "nearest_vertex": cz.NEAREST_VERTEX}[args.mode]
    summary = {"mode": args.mode, "views": {}}
    fields = {}
    with staged_output(args.output) as st:
        for d in ("canon", "mask", "cloud"):
            (st / d).mkdir()
        for job in jobs:
            cam = cio.read_camera(_need(job["camera"], "camera"))
            depth = _raster(job["depth"], "depth map", 1)[..., 0]
            mask = _optional_mask(job["mask"], depth.shape, "depth mask")
            key = str(job["tracked"])
            if key not in fields:
                tracked = cio.read_obj(_need(job["tracked"], "tracked mesh"))
                fields[key] = (tracked, cz.per_vertex_deformation(tracked, canonical))
            tracked, fld = fields[key]
            canon, cmask = cz.bake_canonical_map(depth, mask, cam, tracked, fld, mode)
            world = point_map(depth, cam)
            disp = np.linalg.norm(canon - world, axis=2)[cmask]
            name = job["name"]
            cio.write_raster(st / "canon" / f"{name}.cfr1", canon)
            cio.write_mask(st / "mask" / f"{name}.cfr1", cmask)
            v, u = np.nonzero(cmask)
            cio.write_ply(st / "cloud" / f"{name}.ply", PointCloud(canon[v, u]))
            entry = {"points": int(cmask.sum()), "dropped": int((mask & ~cmask).sum()),
                     "displacement_mean": float(disp.mean()) if disp.size else 0.0,
                     "displacement_max": float(disp.max()) if disp.size else 0.0}
            if job["gt"] is not None and Path(job["gt"]).is_file() and cmask.any():
                gt = _raster(job["gt"], "ground-truth canonical map", 3)
                err = np.linalg.norm(canon - gt, axis=2)[cmask]
                entry["gt_error_max"] = float(err.max())
                entry["gt_within_2e-3"] = float(np.mean(err <= 2e-3))
            summary["views"][name] = entry
        cio.write_json(st / "summary.json", summary)
    return EXIT_OK


# -- match / track ----------------------------------------------------------------------

def _pair_files(args):
    if args.input:
        if not (args.source and args.target):
            raise UsageError("--input requires --source and --target view names")
        root = Path(args.input)
        return (root / "canon" / f"{args.source}.cfr1", root / "mask" / f"{args.source}.cfr1",
                root / "canon" / f"{args.target}.cfr1", root / "mask" / f"{args.target}.cfr1")
    files = (args.source_canon, args.source_mask, args.target_canon, args.target_mask)
    if any(f is None for f in files):
        raise UsageError("give --input/--source/--target or all of --source-canon, --source-mask, "
                         "--target-canon, --target-mask")
    return files


def _load_canon(canon_path, mask_path, what):
    c = _raster(canon_path, f"{what} canonical map", 3)
    return c, _optional_mask(mask_path, c.shape[:2], f"{what} mask")


def cmd_match(args):
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    sc, sm, tc, tm = _pair_files(args)
    src, smask = _load_canon(sc, sm, "source")
    tgt, tmask = _load_canon(tc, tm, "target")
    if not smask.any() or not tmask.any():
        empty = [n for n, m in (("source", smask), ("target", tmask)) if not m.any()]
        raise DataError(f"empty valid mask in {' and '.join(empty)} frame")
    t0 = time.perf_counter()
    index = matcher.build_index(tgt, tmask, args.stride)
    corr = matcher.match_dense(src, smask, index, args.max_distance)
    elapsed = time.perf_counter() - t0
    t = corr.target[corr.valid].astype(np.int64)
    if len(t) and not tmask[t[:, 1], t[:, 0]].all():
        raise InvariantError("a correspondence points at an invalid target pixel")
    with staged_output(args.output) as st:
        r, m = corr.to_raster()
        cio.write_raster(st / "corr.cfr1", r)
        cio.write_mask(st / "corr.mask.cfr1", m)
        d = corr.distance[corr.valid]
        cio.write_json(st / "summary.json", {
            "stride": args.stride, "index_entries": len(index), "valid": int(corr.valid.sum()),
            "distance_mean": float(d.mean()) if d.size else 0.0,
            "distance_max": float(d.max()) if d.size else 0.0,
            "source_shape": list(smask.shape), "target_shape": list(tmask.shape)})
        if args.heatmap:
            cio.write_ppm(st / "heatmap.ppm", colorize(corr.distance, corr.valid, args.heatmap_max))
    _log(f"matched {int(corr.valid.sum())} pixels in {elapsed * 1000:.1f} ms")
    return EXIT_OK


def _parse_seeds(text):
    pts = []
    for item in text.split(";"):
        if item.strip():
            pts.append(_ints(item))
    if any(len(p) != 2 for p in pts):
        raise UsageError("--seeds expects 'u,v;u,v;...'")
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)


def cmd_track(args):
    root = Path(args.input)
    manifest = cio.read_json(_need(root / "manifest.json", "scene manifest"))
    if args.views:
        names = args.views.split(",")
    else:
        names = [v["name"] for v in manifest["views"] if v["camera"] == 0]
    seq, empty = [], []
    for n in names:
        c, m = _load_canon(root / "canon" / f"{n}.cfr1", root / "mask" / f"{n}.cfr1", n)
        if not m.any():
            empty.append(n)
            _log(f"warning: frame {n} has no valid pixels; its track points are invalid")
        seq.append((c, m))
    if len(empty) == len(seq):
        raise DataError("every frame has an empty valid mask")
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
    else:
        if not seq[0][1].any():
            raise DataError(f"frame {names[0]} has no valid pixels to seed tracks")
        seeds = _track_seeds(seq[0][1], args.n_seeds)
    try:
        tracks = matcher.track(seeds, seq, args.max_distance)
    except ValueError as e:
        raise DataError(str(e)) from None
    with staged_output(args.output) as st:
        out = tracks.to_json()
        out["views"] = names
        cio.write_json(st / "tracks.json", out)
    return EXIT_OK


# -- evaluation -------------------------------------------------------------------------

def _pairs_for_eval(pred, gt):
    pred, gt = Path(pred), Path(gt)
    if gt.is_dir():
        if not pred.is_dir():
            raise DataError(f"ground truth {gt} is a directory but prediction {pred} is not")
        names = sorted(p.name for p in gt.glob("*.cfr1") if not p.name.endswith(".mask.cfr1"))
        if not names:
            raise DataError(f"no .cfr1 files in {gt}")
        return [(n[:-5], pred / n, gt / n) for n in names]
    return [(gt.stem, pred, gt)]


def cmd_eval_depth(args):
    jobs = _pairs_for_eval(args.pred, args.gt)
    loaded, problems = [], []
    for name, p, g in jobs:
        if not p.is_file():
            problems.append(f"{name}: missing prediction {p}")
            continue
        pd = _raster(p, "predicted depth", 1)[..., 0]
        gd = _raster(_need(g, "ground-truth depth"), "ground-truth depth", 1)[..., 0]
        if pd.shape != gd.shape:
            problems.append(f"{name}: prediction {pd.shape} vs ground truth {gd.shape}")
            continue
        if args.mask is None:
            mpath = None
        elif Path(args.mask).is_dir():
            mpath = Path(args.mask) / f"{name}.cfr1"
        else:
            mpath = args.mask
        if mpath is None or not Path(mpath).is_file():
            _log(f"warning: no evaluation mask for {name}, using pixels with positive "
                 "ground-truth depth")
            mask = np.isfinite(gd) & (gd > 0)
        else:
            mask = _mask(mpath, f"evaluation mask for {name}", gd.shape)
        loaded.append((name, pd, gd, mask))
    if problems:
        raise DataError("shape/file problems:\n  " + "\n  ".join(problems))
    report = metrics.MetricReport(header={"align": args.align, "files": len(loaded)})
    all_p, all_g = [], []
    for name, pd, gd, mask in loaded:
        r = metrics.depth_metrics(pd, gd, mask, args.align)
        if len(loaded) > 1:
            report.add(f"{name}/rmse", r.rmse, r.count)
            report.add(f"{name}/absrel", r.absrel, r.count)
        p = pd[mask]
        if args.align == "median":
            p = p * (np.median(gd[mask]) / np.median(p))
        all_p.append(p)
        all_g.append(gd[mask])
    r = metrics.depth_metrics(np.concatenate(all_p), np.concatenate(all_g))
    report.add("rmse", r.rmse, r.count)
    report.add("absrel", r.absrel, r.count)
    with staged_output(args.output) as st:
        _report_out(st, report, args.scale_report)
    print(report.dumps(args.scale_report), end="")
    return EXIT_OK


def _load_corr(path, mask_path, target_shape=None):
    r = _raster(path, "correspondence raster", 3)
    if mask_path is None:
        guess = Path(str(path)[:-5] + ".mask.cfr1") if str(path).endswith(".cfr1") else None
        mask_path = guess if guess is not None and guess.is_file() else None
    m = _optional_mask(mask_path, r.shape[:2], "correspondence mask")
    return matcher.DenseCorrespondence.from_raster(r, m, target_shape)


def cmd_eval_corr(args):
    thresholds = _floats(args.thresholds)
    tshape = None
    if args.target_img:
        tshape = _raster(args.target_img, "target image").shape[:2]
    bwd = None
    if args.backward:
        bwd = _load_corr(args.backward, args.backward_mask)
        tshape = tshape or bwd.shape
    pred = _load_corr(args.pred, args.pred_mask, tshape)
    report = metrics.MetricReport(header={"wpe_direction": "target_to_base" + ("+reverse" if args.wpe_both else "")})
    if args.gt:
        gt = _load_corr(args.gt, args.gt_mask, tshape)
        e = metrics.epe2d(pred, gt, thresholds)
        report.add("epe2d", e.mean, e.count)
        for t in thresholds:
            report.add(f"pct_lt_{t:g}px", e.rates[t], e.count)
    if bwd is not None:
        if bwd.target_shape != pred.shape:
            bwd = matcher.DenseCorrespondence(bwd.target, bwd.distance, bwd.valid, pred.shape)
        c = metrics.cce(pred, bwd)
        report.add("cce_mean", c.mean, c.count)
        report.add("cce_median", c.median, c.count)
        report.add("cce_lt_2px", c.rate_lt_2px, c.count)
    if args.base_img or args.target_img:
        if not (args.base_img and args.target_img):
            raise UsageError("WPE needs both --base-img and --target-img")
        base = _raster(args.base_img, "base image", 3)
        target = _raster(args.target_img, "target image", 3)
        runs = [("", base, target, pred)]
        if args.wpe_both:
            if bwd is None:
                raise UsageError("--wpe-both needs --backward")
            runs.append(("_reverse", target, base, bwd))
        for suffix, b, t, c in runs:
            w = metrics.wpe(b, t, c)
            report.add(f"wpe_l1{suffix}", w.l1, w.count)
            if w.grad_count:
                report.add(f"wpe_grad{suffix}", w.grad, w.grad_count)
            if w.ssim_count:
                report.add(f"wpe_ssim{suffix}", w.ssim, w.ssim_count)
            report.header[f"wpe_excluded{suffix}"] = w.excluded
    if not report.values:
        raise UsageError("nothing to evaluate: give --gt, --backward or --base-img/--target-img")
    with staged_output(args.output) as st:
        _report_out(st, report, args.scale_report)
        if args.heatmap and args.gt:
            err = np.linalg.norm(pred.target - gt.target, axis=2)
            ok = pred.valid & gt.valid
            cio.write_ppm(st / "heatmap.ppm", colorize(np.where(ok, err, 0.0), ok, args.heatmap_max))
    print(report.dumps(args.scale_report), end="")
    return EXIT_OK


def _eval_track_3d(args, report):
    root = Path(args.input)
    manifest, seq = load_sequence(root)
    cam_idx = args.camera
    if not 0 <= cam_idx < manifest["n_cameras"]:
        raise UsageError(f"--camera must be in [0, {manifest['n_cameras']})")
    margins = _ints(args.margins)
    n = manifest["n_frames"]
    if any(m < 1 or m >= n for m in margins):
        raise DataError(f"margins {margins} need 1 <= margin < {n} frames")
    pred_dir = Path(args.pred_dir)
    names = [view_name(f, cam_idx) for f in range(n)]
    pts, masks, canons = [], [], []
    for f, name in enumerate(names):
        cam = seq.cameras[cam_idx]
        dpath = pred_dir / "depth" / f"{name}.cfr1"
        if not dpath.is_file():
            dpath = root / "depth" / f"{name}.cfr1"
        depth = _raster(dpath, "depth map", 1)[..., 0]
        canon, mask = _load_canon(pred_dir / "canon" / f"{name}.cfr1", pred_dir / "mask" / f"{name}.cfr1", name)
        mask = mask & (depth > 0)
        pts.append(point_map(np.where(mask, depth, 1.0), cam))
        masks.append(mask)
        canons.append(canon)
    need = {(t, t + m) for m in margins for t in range(n - m)}
    need |= {(b, a) for a, b in need}
    corr, gt = {}, {}
    for a, b in sorted(need):
        corr[(a, b)] = matcher.match_dense(canons[a], masks[a], matcher.build_index(canons[b], masks[b]))
    for a, b in sorted(need | {(i, i) for p in need for i in p}):
        gt[(a, b)] = synth.gt_point_tracks(seq.view(a, cam_idx), seq.frames[b].mesh)
    scale = 1.0
    if args.normalize:
        g0, m0 = gt[(0, 0)]
        scale = normalization_scale(g0[m0])
    pts = [p / scale for p in pts]
    gt = {k: (v[0] / scale, v[1]) for k, v in gt.items()}
    res = metrics.epe3d_margins(pts, masks, corr, gt, margins)
    count = int(sum(m.sum() for m in masks))
    for m in margins:
        for k, v in res[m].items():
            report.add(f"epe3d_m{m}/{k}", v, count)
    report.add(f"epe3d_m{min(margins)}-{max(margins)}", res["range"], count)
    report.header["epe3d_convention"] = metrics.EPE3D_CONVENTION
    report.header["normalization_scale"] = scale


def cmd_eval_track(args):
    thresholds = _floats(args.thresholds)
    report = metrics.MetricReport()
    if args.pred:
        if not args.gt:
            raise UsageError("--pred needs --gt")
        p = matcher.TrackSet.from_json(cio.read_json(_need(args.pred, "predicted tracks")))
        g = matcher.TrackSet.from_json(cio.read_json(_need(args.gt, "ground-truth tracks")))
        if p.positions.shape != g.positions.shape:
            raise DataError(f"track shapes differ: {p.positions.shape} vs {g.positions.shape}")
        ok = p.valid & g.valid
        if not ok.any():
            raise DataError("no track point is valid in both prediction and ground truth")
        err = np.linalg.norm(p.positions - g.positions, axis=2)[ok]
        report.add("epe2d", err.mean(), err.size)
        for t in thresholds:
            report.add(f"pct_lt_{t:g}px", np.mean(err < t), err.size)
    if args.pred_dir:
        if not args.input:
            raise UsageError("--pred-dir needs --input SCENE_DIR for ground truth")
        _eval_track_3d(args, report)
    if not report.values:
        raise UsageError("give --pred/--gt for 2-D tracks or --input/--pred-dir for 3-D errors")
    with staged_output(args.output) as st:
        _report_out(st, report, args.scale_report)
    print(report.dumps(args.scale_report), end="")
    return EXIT_OK


# -- losses -------------------------------------------------------------------------------

def cmd_loss_eval(args):
    pred, gt = Path(args.pred), Path(args.gt)
    w = losses.LossWeights(alpha=args.alpha, gamma=args.gamma, lambda_c=args.lambda_c,
                           lambda_d=args.lambda_d)
    inputs = {}
    for name in losses.MAPS:
        X = _raster(pred / f"{name}.cfr1", f"predicted {name} map")
        Xs = _raster(gt / f"{name}.cfr1", f"ground-truth {name} map")
        if X.shape != Xs.shape:
            raise DataError(f"{name}: prediction {X.shape} vs ground truth {Xs.shape}")
        W = _raster(pred / f"{name}_conf.cfr1", f"{name} confidence map", 1)
        mpath = gt / f"{name}_mask.cfr1"
        if not mpath.is_file():
            mpath = gt / "mask.cfr1"
        mask = _optional_mask(mpath, X.shape[:2], f"{name} mask")
        inputs[name] = losses.LossInputs(X, Xs, mask, W, args.norm)
    total, breakdown = losses.total_loss(inputs["depth"], inputs["ray"], inputs["canon"], w,
                                         args.normalize_channels)
    channels = {k: v.pred.shape[2] for k, v in inputs.items()} if args.normalize_channels else None
    if abs(losses.recompose(breakdown, w, channels) - total) > 1e-12 * max(1.0, abs(total)):
        raise InvariantError("loss breakdown does not recompose to the total")
    out = {"total": total, "terms": breakdown,
           "weights": {"alpha": w.alpha, "gamma": w.gamma, "lambda_c": w.lambda_c,
                       "lambda_d": w.lambda_d},
           "norm": args.norm, "normalize_channels": bool(args.normalize_channels)}
    with staged_output(args.output) as st:
        cio.write_json(st / "loss.json", out)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# -- heatmap / bench -------------------------------------------------------------------------

def cmd_heatmap(args):
    r = _raster(args.input, "raster")
    if not 0 <= args.channel < r.shape[2]:
        raise UsageError(f"--channel must be in [0, {r.shape[2]})")
    valid = _mask(args.mask, "mask", r.shape[:2]) if args.mask else None
    rgb = colorize(np.asarray(r[..., args.channel], np.float64), valid, args.vmax)
    out = Path(args.output)
    if not out.parent.is_dir():
        raise DataError(f"parent directory of {out} does not exist")
    cio.write_ppm(out, rgb)
    return EXIT_OK


def cmd_bench(args):
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    threads = _threads.configure_threads(args.threads)
    if args.source_canon:
        src, smask = _load_canon(args.source_canon, args.source_mask, "source")
        tgt, tmask = _load_canon(args.target_canon, args.target_mask, "target")
    else:
        src, smask, tgt, tmask = synth.benchmark_pair(args.size, args.seed,
                                                      off_surface=args.off_surface)
    # warm-up compiles or loads the cached kernels
    matcher.match_dense(src, smask, matcher.build_index(tgt, tmask, args.stride))
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        idx = matcher.build_index(tgt, tmask, args.stride)
        matcher.match_dense(src, smask, idx)
        times.append(time.perf_counter() - t0)
    res = {"shape": list(smask.shape), "stride": args.stride, "off_surface": args.off_surface,
           "threads": threads, "repeats": args.repeats, "median_s": float(np.median(times)), "min_s": float(min(times)),
           "max_s": float(max(times)), "limit_s": args.limit}
    res["pass"] = res["median_s"] < args.limit
    print(json.dumps(res, indent=2, sort_keys=True))
    if args.output:
        out = Path(args.output)
        if not out.parent.is_dir():
            raise DataError(f"parent directory of {out} does not exist")
        cio.write_json(out, res)
    if args.check and not res["pass"]:
        _log(f"median {res['median_s']:.3f} s exceeds {args.limit} s")
        return EXIT_INVARIANT
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="canonface", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=fn)
        s.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
        subs[name] = s
        return s

    def scale(s):
        s.add_argument("--scale-report", type=int, choices=(1, 10, 100), default=1,
                       help="multiply error columns by this factor in the written report")

    s = add("synth", cmd_synth, "generate a synthetic multi-view scene directory")
    s.add_argument("--output", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--cameras", type=int, default=synth.N_RING_CAMERAS)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--K", type=int, default=synth.DEFAULT_K)
    s.add_argument("--subdivisions", type=int, default=synth.DEFAULT_SUBDIVISIONS)
    s.add_argument("--weight-scale", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian depth noise sigma")
    s.add_argument("--n-seeds", type=int, default=64, help="ground-truth track seeds (frames > 1)")

    s = add("canonicalize", cmd_canonicalize, "bake canonical maps from depth and tracked meshes")
    s.add_argument("--input", help="scene directory with manifest.json")
    s.add_argument("--views", help="comma-separated view names (default: all)")
    s.add_argument("--depth")
    s.add_argument("--mask")
    s.add_argument("--camera")
    s.add_argument("--name", default="view")
    s.add_argument("--tracked", help="tracked mesh OBJ (default: per-view mesh of the scene)")
    s.add_argument("--canonical", help="canonical mesh OBJ (default: scene neutral.obj)")
    s.add_argument("--mode", choices=("interpolate", "nearest_vertex"), default="interpolate")
    s.add_argument("--output", required=True)

    s = add("match", cmd_match, "dense canonical-space correspondence between two frames")
    for flag in ("--input", "--source", "--target", "--source-canon", "--source-mask",
                 "--target-canon", "--target-mask"):
        s.add_argument(flag)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--max-distance", type=float)
    s.add_argument("--heatmap", action="store_true", help="write heatmap.ppm of canonical distance")
    s.add_argument("--heatmap-max", type=float)
    s.add_argument("--output", required=True)

    s = add("track", cmd_track, "track frame-0 seed pixels through a sequence of views")
    s.add_argument("--input", required=True)
    s.add_argument("--views", help="comma-separated view names in frame order (default: camera 0)")
    s.add_argument("--seeds", help="'u,v;u,v;...' seed pixels in the first view")
    s.add_argument("--n-seeds", type=int, default=64)
    s.add_argument("--max-distance", type=float)
    s.add_argument("--output", required=True)

    s = add("eval-depth", cmd_eval_depth, "RMSE and AbsRel of depth maps")
    s.add_argument("--pred", required=True, help="predicted depth raster or directory")
    s.add_argument("--gt", required=True, help="ground-truth depth raster or directory")
    s.add_argument("--mask", help="evaluation mask raster or directory (default: pixels with ground truth > 0)")
    s.add_argument("--align", choices=("none", "median"), default="none")
    s.add_argument("--output", required=True)
    scale(s)

    s = add("eval-corr", cmd_eval_corr, "EPE, CCE and WPE of a correspondence field")
    s.add_argument("--pred", required=True)
    s.add_argument("--pred-mask")
    s.add_argument("--gt")
    s.add_argument("--gt-mask")
    s.add_argument("--backward", help="target->source field for CCE")
    s.add_argument("--backward-mask")
    s.add_argument("--base-img")
    s.add_argument("--target-img")
    s.add_argument("--wpe-both", action="store_true", help="also warp base into target")
    s.add_argument("--thresholds", default="3,5,10")
    s.add_argument("--heatmap", action="store_true")
    s.add_argument("--heatmap-max", type=float)
    s.add_argument("--output", required=True)
    scale(s)

    s = add("eval-track", cmd_eval_track, "2-D track error and 3-D margin errors")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--input", help="scene directory (ground truth for 3-D errors)")
    s.add_argument("--pred-dir", help="directory with canon/, mask/ and optional depth/ per view")
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("--margins", default="1")
    s.add_argument("--no-normalize", dest="normalize", action="store_false")
    s.add_argument("--thresholds", default="3,5,10")
    s.add_argument("--output", required=True)
    scale(s)

    s = add("loss-eval", cmd_loss_eval, "nine-term training loss breakdown")
    s.add_argument("--pred", required=True, help="directory with {depth,ray,canon}.cfr1 and *_conf.cfr1")
    s.add_argument("--gt", required=True, help="directory with {depth,ray,canon}.cfr1 and mask.cfr1")
    s.add_argument("--alpha", type=float, default=0.2)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--lambda-c", type=float, default=5.0)
    s.add_argument("--lambda-d", type=float, default=1.0)
    s.add_argument("--norm", choices=(losses.L1, losses.L2), default=losses.L1)
    s.add_argument("--normalize-channels", action="store_true")
    s.add_argument("--output", required=True)

    s = add("heatmap", cmd_heatmap, "render one raster channel as a binary PPM")
    s.add_argument("--input", required=True)
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--mask")
    s.add_argument("--vmax", type=float)
    s.add_argument("--output", required=True)

    s = add("bench", cmd_bench, "time index build plus dense matching")
    s.add_argument("--size", type=int, default=518)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--off-surface", type=float, default=0.0,
                   help="target height bias as a fraction of the surface amplitude")
    s.add_argument("--limit", type=float, default=0.2, help="seconds per pair")
    s.add_argument("--check", action="store_true", help="exit 3 when the median exceeds --limit")
    for flag in ("--source-canon", "--source-mask", "--target-canon", "--target-mask"):
        s.add_argument(flag)
    s.add_argument("--output")
    return p, subs


def _parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = cio.read_json(_need(args.config, "config file"))
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sp = subs[args.command]
        dests = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - dests - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        cfg.pop("command", None)
        for a in sp._actions:
            if a.dest in cfg and a.required:
                a.required = False
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = _parse(argv)
        return args.func(args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_USAGE
    except InvariantError as e:
        _log(f"invariant violated: {e}")
        return EXIT_INVARIANT
    except (DataError, ValueError, OSError, KeyError) as e:
        _log(f"error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
