import json
from pathlib import Path

import numpy as np
import pytest

from canonface import io as cio
from canonface.cli import INVALID_COLOR, RAMP_COLORS, colorize, main
from canonface.geometry import point_map


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene") / "s"
    assert run("synth", "--output", out, "--size", 32, "--cameras", 4, "--frames", 3,
               "--subdivisions", 2, "--seed", 7, "--n-seeds", 16) == 0
    return out


def test_synth_default_camera_count(tmp_path):
    out = tmp_path / "d"
    assert run("synth", "--output", out, "--size", 16, "--subdivisions", 1) == 0
    m = cio.read_json(out / "manifest.json")
    assert m["n_cameras"] == 16 and len(list((out / "cameras").iterdir())) == 16
    assert m["format"]["raster"] == "CFR1"


def test_synth_is_byte_identical(tmp_path, scene):
    again = tmp_path / "again"
    assert run("synth", "--output", again, "--size", 32, "--cameras", 4, "--frames", 3,
               "--subdivisions", 2, "--seed", 7, "--n-seeds", 16) == 0
    assert tree_bytes(again) == tree_bytes(scene)


def test_synth_invalid_output_path(tmp_path):
    target = tmp_path / "missing" / "deeper" / "out"
    assert run("synth", "--output", target, "--size", 16) == 2
    assert list(tmp_path.iterdir()) == []


def test_synth_scene_layout(scene):
    m = cio.read_json(scene / "manifest.json")
    assert len(m["views"]) == 12
    for sub in ("depth", "mask", "canon", "rgb"):
        assert len(list((scene / sub).glob("*.cfr1"))) == 12
    assert (scene / "gt_tracks.json").is_file() and (scene / "neutral.obj").is_file()
    for src, dst in m["gt_pairs"]:
        assert (scene / "gt_corr" / f"{src}__{dst}.cfr1").is_file()


def test_usage_errors_exit_one(tmp_path):
    assert run("synth") == 1
    assert run("synth", "--output", tmp_path / "x", "--size", 2) == 1
    assert run("match", "--output", tmp_path / "m") == 1
    assert run("nonsense") == 1


def test_canonicalize_matches_renderer(tmp_path, scene):
    out = tmp_path / "c"
    assert run("canonicalize", "--input", scene, "--output", out) == 0
    summary = cio.read_json(out / "summary.json")
    assert len(summary["views"]) == 12
    for entry in summary["views"].values():
        assert entry["gt_within_2e-3"] >= 0.99
    assert cio.read_ply(out / "cloud" / "f000_c00.ply").points.shape[0] == \
        summary["views"]["f000_c00"]["points"]


def test_canonicalize_zero_deformation_reproduces_world(tmp_path, scene):
    out = tmp_path / "z"
    mesh = scene / "meshes" / "f000.obj"
    assert run("canonicalize", "--depth", scene / "depth" / "f000_c01.cfr1",
               "--mask", scene / "mask" / "f000_c01.cfr1", "--camera", scene / "cameras" / "c01.json",
               "--tracked", mesh, "--canonical", mesh, "--output", out) == 0
    depth = cio.read_raster(scene / "depth" / "f000_c01.cfr1")[..., 0].astype(np.float64)
    cam = cio.read_camera(scene / "cameras" / "c01.json")
    canon = cio.read_raster(out / "canon" / "view.cfr1")
    m = cio.read_mask(out / "mask" / "view.cfr1")
    world = point_map(depth, cam).astype(np.float32)
    assert np.array_equal(canon[m], world[m])


def test_canonicalize_errors(tmp_path, scene, capsys):
    assert run("canonicalize", "--input", scene, "--canonical", tmp_path / "none.obj",
               "--output", tmp_path / "o") == 2
    assert "none.obj" in capsys.readouterr().err
    small = tmp_path / "small.obj"
    small.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert run("canonicalize", "--input", scene, "--canonical", small, "--output", tmp_path / "p") == 2
    assert "1 faces" in capsys.readouterr().err


def test_match_identity_gives_zero_heatmap(tmp_path, scene):
    out = tmp_path / "m"
    assert run("match", "--input", scene, "--source", "f000_c00", "--target", "f000_c00",
               "--heatmap", "--output", out) == 0
    img = cio.read_ppm(out / "heatmap.ppm")
    mask = cio.read_mask(scene / "mask" / "f000_c00.cfr1")
    assert (img[mask] == RAMP_COLORS[0]).all()
    assert (img[~mask] == INVALID_COLOR).all()
    assert cio.read_json(out / "summary.json")["distance_max"] == 0.0


def test_match_stride_one_is_default(tmp_path, scene):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("match", "--input", scene, "--source", "f000_c00", "--target", "f001_c00", "--output", a) == 0
    assert run("match", "--input", scene, "--source", "f000_c00", "--target", "f001_c00",
               "--stride", 1, "--output", b) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_match_empty_mask_is_data_error(tmp_path, scene):
    empty = tmp_path / "empty.cfr1"
    cio.write_mask(empty, np.zeros((32, 32), bool))
    assert run("match", "--source-canon", scene / "canon" / "f000_c00.cfr1", "--source-mask", empty,
               "--target-canon", scene / "canon" / "f000_c01.cfr1",
               "--target-mask", scene / "mask" / "f000_c01.cfr1", "--output", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_eval_corr_against_ground_truth(tmp_path, scene, capsys):
    out = tmp_path / "m"
    assert run("match", "--input", scene, "--source", "f000_c00", "--target", "f000_c01", "--output", out) == 0
    capsys.readouterr()
    gt = scene / "gt_corr" / "f000_c00__f000_c01.cfr1"
    bwd = scene / "gt_corr" / "f000_c01__f000_c00.cfr1"
    assert run("eval-corr", "--pred", out / "corr.cfr1", "--gt", gt, "--backward", bwd,
               "--base-img", scene / "rgb" / "f000_c00.cfr1", "--target-img", scene / "rgb" / "f000_c01.cfr1",
               "--output", tmp_path / "e") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["values"]["epe2d"] < 1.5 and rep["values"]["pct_lt_3px"] > 0.9
    assert {"cce_mean", "wpe_l1", "wpe_grad"} <= set(rep["values"])
    assert (tmp_path / "e" / "report.json").is_file()


def test_eval_depth_exact_and_shape_problems(tmp_path, scene, capsys):
    assert run("eval-depth", "--pred", scene / "depth", "--gt", scene / "depth",
               "--mask", scene / "mask", "--output", tmp_path / "d") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["values"]["rmse"] == 0.0 and rep["values"]["absrel"] == 0.0
    # without masks the evaluation falls back to positive ground-truth depth
    assert run("eval-depth", "--pred", scene / "depth", "--gt", scene / "depth",
               "--output", tmp_path / "n") == 0
    assert json.loads(capsys.readouterr().out)["counts"]["rmse"] == rep["counts"]["rmse"]
    bad = tmp_path / "bad"
    bad.mkdir()
    cio.write_raster(bad / "f000_c00.cfr1", np.ones((5, 5), np.float32))
    cio.write_raster(bad / "f000_c01.cfr1", np.ones((6, 5), np.float32))
    gt = tmp_path / "gt"
    gt.mkdir()
    for n in ("f000_c00", "f000_c01"):
        cio.write_raster(gt / f"{n}.cfr1", np.ones((4, 4), np.float32))
    assert run("eval-depth", "--pred", bad, "--gt", gt, "--output", tmp_path / "x") == 2
    err = capsys.readouterr().err
    assert "f000_c00" in err and "f000_c01" in err


def test_track_and_eval_track(tmp_path, scene, capsys):
    assert run("track", "--input", scene, "--n-seeds", 16, "--output", tmp_path / "t") == 0
    tr = cio.read_json(tmp_path / "t" / "tracks.json")
    assert tr["views"] == ["f000_c00", "f001_c00", "f002_c00"] and len(tr["seeds"]) == 16
    assert run("eval-track", "--pred", tmp_path / "t" / "tracks.json", "--gt", scene / "gt_tracks.json",
               "--output", tmp_path / "e") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["values"]["epe2d"] < 2.0


def test_eval_track_3d_with_perfect_canon(tmp_path, scene, capsys):
    assert run("eval-track", "--input", scene, "--pred-dir", scene, "--margins", "1,2",
               "--output", tmp_path / "e") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["values"]["epe3d_m1/P0(t0)"] == pytest.approx(0.0, abs=1e-5)
    assert "epe3d_m1-2" in rep["values"]


def _loss_dirs(tmp_path, rng, exact=False):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for name, c in (("depth", 1), ("ray", 3), ("canon", 3)):
        t = rng.normal(size=(6, 6, c)).astype(np.float32)
        p = t if exact else (t + rng.normal(size=t.shape)).astype(np.float32)
        cio.write_raster(gt / f"{name}.cfr1", t)
        cio.write_raster(pred / f"{name}.cfr1", p)
        cio.write_raster(pred / f"{name}_conf.cfr1", np.ones((6, 6), np.float32))
    cio.write_mask(gt / "mask.cfr1", np.ones((6, 6), bool))
    return pred, gt


def test_loss_eval(tmp_path, capsys):
    rng = np.random.default_rng(0)
    pred, gt = _loss_dirs(tmp_path, rng, exact=True)
    assert run("loss-eval", "--pred", pred, "--gt", gt, "--output", tmp_path / "o") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["total"] == 0.0 and len(out["terms"]) == 9
    assert out["weights"] == {"alpha": 0.2, "gamma": 1.0, "lambda_c": 5.0, "lambda_d": 1.0}


def test_loss_eval_bad_confidence(tmp_path):
    pred, gt = _loss_dirs(tmp_path, np.random.default_rng(1))
    cio.write_raster(pred / "ray_conf.cfr1", np.zeros((6, 6), np.float32))
    assert run("loss-eval", "--pred", pred, "--gt", gt, "--output", tmp_path / "o") == 2


def test_colorize_ramp_endpoints():
    v = np.array([[0.0, 1.0, 0.5]])
    valid = np.array([[True, True, False]])
    rgb = colorize(v, valid, vmax=1.0)
    assert (rgb[0, 0] == RAMP_COLORS[0]).all() and (rgb[0, 1] == RAMP_COLORS[-1]).all()
    assert (rgb[0, 2] == INVALID_COLOR).all()


def test_heatmap_command(tmp_path, scene):
    out = tmp_path / "h.ppm"
    assert run("heatmap", "--input", scene / "depth" / "f000_c00.cfr1",
               "--mask", scene / "mask" / "f000_c00.cfr1", "--output", out) == 0
    assert cio.read_ppm(out).shape == (32, 32, 3)
    assert run("heatmap", "--input", scene / "depth" / "f000_c00.cfr1", "--channel", 3,
               "--output", out) == 1


def test_config_defaults_and_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 24, "repeats": 1, "limit": 1e-9}))
    assert run("bench", "--config", cfg) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["shape"] == [24, 24] and res["repeats"] == 1 and res["pass"] is False
    assert run("bench", "--config", cfg, "--check") == 3
    capsys.readouterr()
    assert run("bench", "--config", cfg, "--size", 20, "--limit", 100, "--check") == 0
    assert json.loads(capsys.readouterr().out)["shape"] == [20, 20]
    cfg.write_text(json.dumps({"sizee": 3}))
    assert run("bench", "--config", cfg) == 1
