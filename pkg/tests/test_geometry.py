import numpy as np
import pytest
from hypothesis import given, strategies as st

from canonface.geometry import (Camera, DimensionError, PointCloud, backproject, look_at,
                                normalize_cloud, point_map, project, ray_map,
                                rotation_from_axis_angle, sample_bilinear)

from helpers import identity_camera, random_camera


def test_camera_rejects_bad_rotation_and_intrinsics():
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 1.001 * np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 0, 4)


def test_camera_json_round_trip(rng):
    cam = random_camera(rng)
    d = cam.to_dict()
    assert d["convention"] == "world_from_camera,z_depth,half_pixel"
    assert len(d["rotation"]) == 9 and len(d["center"]) == 3
    back = Camera.from_dict(d)
    assert np.array_equal(back.rotation, cam.rotation)
    assert np.array_equal(back.center, cam.center)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == \
        (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


def test_ray_map_principal_pixel():
    assert np.allclose(ray_map(identity_camera())[0, 0], [0, 0, 1])


def test_ray_map_rotates_with_camera(rng):
    cam = random_camera(rng)
    R = rotation_from_axis_angle(rng.normal(size=3), 0.7)
    turned = Camera(cam.fx, cam.fy, cam.cx, cam.cy, R @ cam.rotation, cam.center,
                    cam.width, cam.height)
    assert np.allclose(ray_map(turned), ray_map(cam) @ R.T, atol=1e-12)


def test_ray_map_matches_per_pixel_formula(rng):
    cam = random_camera(rng)
    rays = ray_map(cam)
    for v in range(cam.height):
        for u in range(cam.width):
            d = np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
            d = cam.rotation @ d
            d = d / np.sqrt(d @ d)
            assert np.allclose(rays[v, u], d, atol=1e-12)


@given(st.integers(0, 10_000))
def test_ray_map_unit_norm(seed):
    cam = random_camera(np.random.default_rng(seed), 7, 5)
    assert np.all(np.abs(np.linalg.norm(ray_map(cam), axis=2) - 1.0) <= 1e-6)


def test_backproject_center_pixel():
    cam = Camera(1, 1, 1.5, 1.5, np.eye(3), np.zeros(3), 3, 3)
    depth = np.full((3, 3), 2.0)
    pc = backproject(depth, cam)
    k = np.flatnonzero((pc.pixels == [1, 1]).all(axis=1))[0]
    assert np.allclose(pc.points[k], [0, 0, 2])


def test_backproject_matches_matrix_oracle(rng):
    cam = random_camera(rng, 16, 16)
    depth = rng.uniform(0.5, 5.0, size=(16, 16))
    pc = backproject(depth, cam)
    K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    Kinv = np.linalg.inv(K)
    for (u, v), p in zip(pc.pixels, pc.points):
        ray = Kinv @ np.array([u + 0.5, v + 0.5, 1.0])
        expect = cam.rotation @ (ray * depth[v, u]) + cam.center
        assert np.allclose(p, expect, atol=1e-10)


def test_backproject_drops_nonpositive_and_checks_shape(rng):
    cam = random_camera(rng, 4, 4)
    depth = np.ones((4, 4))
    depth[0, 0] = 0.0
    depth[1, 2] = -3.0
    mask = np.ones((4, 4), bool)
    mask[3, 3] = False
    pc = backproject(depth, cam, mask)
    assert len(pc) == 13 and pc.dropped == 2
    with pytest.raises(DimensionError):
        backproject(np.ones((4, 5)), cam)
    with pytest.raises(DimensionError):
        backproject(depth, cam, np.ones((3, 4), bool))


def test_project_trivial():
    cam = Camera(100, 100, 50, 50, np.eye(3), np.zeros(3), 100, 100)
    pr = project(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]), cam)
    assert np.allclose(pr.pixels[0], [50, 50]) and pr.depth[0] == 2.0
    assert pr.in_frustum.tolist() == [True, False, False]


def test_project_backproject_round_trip(rng):
    for _ in range(5):
        cam = random_camera(rng, 12, 9)
        depth = rng.uniform(0.2, 10.0, size=(9, 12))
        pc = backproject(depth, cam)
        pr = project(pc, cam)
        assert np.all(np.abs(pr.pixels - (pc.pixels + 0.5)) <= 1e-5)
        assert np.all(np.abs(pr.depth - depth[pc.pixels[:, 1], pc.pixels[:, 0]]) <= 1e-6)
        assert pr.in_frustum.all()


def test_rigid_transform_of_camera_and_cloud_keeps_projection(rng):
    cam = random_camera(rng, 10, 10)
    pts = cam.center + rng.normal(size=(50, 3)) + cam.rotation[:, 2] * 5
    R = rotation_from_axis_angle(rng.normal(size=3), 1.1)
    t = rng.normal(size=3)
    moved = cam.transformed(R, t)
    a = project(pts, cam)
    b = project(pts @ R.T + t, moved)
    assert np.allclose(a.pixels, b.pixels, atol=1e-6)
    assert np.allclose(a.depth, b.depth, atol=1e-6)


def test_point_map_matches_backproject(rng):
    cam = random_camera(rng, 6, 5)
    depth = rng.uniform(1, 2, size=(5, 6))
    pm = point_map(depth, cam)
    pc = backproject(depth, cam)
    assert np.allclose(pm[pc.pixels[:, 1], pc.pixels[:, 0]], pc.points, atol=1e-12)


def test_look_at_points_axis_at_target():
    cam = look_at((0, 0, 5), (0, 0, 0), fx=10, width=8, height=8)
    pr = project(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), cam)
    assert np.allclose(pr.pixels[0], [4, 4])
    assert pr.pixels[1, 1] < 4  # world up appears towards the top of the image


def test_normalize_trivial_and_errors():
    out, s = normalize_cloud(np.array([[2.0, 0.0, 0.0]]))
    assert s == 2.0 and np.allclose(out.points, [[1, 0, 0]])
    with pytest.raises(ValueError):
        normalize_cloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        normalize_cloud(np.zeros((4, 3)))


def test_normalize_summation_oracle(rng):
    pts = rng.normal(size=(1000, 3)) * 3.7 + 1.0
    out, s = normalize_cloud(pts)
    total = 0.0
    for p in out.points:
        total += (p[0] ** 2 + p[1] ** 2 + p[2] ** 2) ** 0.5
    assert abs(total / 1000 - 1.0) <= 1e-6
    again, s2 = normalize_cloud(out)
    assert abs(s2 - 1.0) <= 1e-6 and np.allclose(again.points, out.points, atol=1e-12)


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_normalize_scale_equivariant(k, seed):
    pts = np.random.default_rng(seed).normal(size=(20, 3))
    a, _ = normalize_cloud(pts)
    b, _ = normalize_cloud(k * pts)
    assert np.allclose(a.points, b.points, atol=1e-9)


def test_pointcloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))


def test_sample_bilinear_exact_and_interpolated():
    img = np.arange(12, dtype=float).reshape(3, 4)
    valid = np.ones((3, 4), bool)
    vals, ok = sample_bilinear(img, valid, np.array([1.0, 1.5, 3.0]), np.array([2.0, 0.5, 2.0]))
    assert ok.all() and np.allclose(vals, [9.0, 3.5, 11.0])
    valid[0, 2] = False
    vals, ok = sample_bilinear(img, valid, np.array([1.5, 1.0]), np.array([0.5, 1.0]))
    assert ok.tolist() == [False, True]
    _, ok = sample_bilinear(img, np.ones((3, 4), bool), np.array([3.2, -0.1]), np.array([0.0, 0.0]))
    assert not ok.any()
