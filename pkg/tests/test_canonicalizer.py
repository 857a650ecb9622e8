import numpy as np
import pytest

from canonface.canonicalizer import (NEAREST_VERTEX, DeformationField, TopologyError,
                                     attach_point, bake_canonical_map, canonicalize_cloud,
                                     per_vertex_deformation, transfer_displacements)
from canonface.geometry import look_at, point_map
from canonface.meshes import TriMesh
from canonface.synth import icosphere


def _pair(rng):
    tracked = icosphere(2)
    canon = tracked.with_vertices(tracked.vertices + 0.05 * rng.normal(size=tracked.vertices.shape))
    return tracked, canon


def test_topology_mismatch_reports_counts():
    a, b = icosphere(1), icosphere(2)
    with pytest.raises(TopologyError, match="80 faces"):
        per_vertex_deformation(a, b)
    swapped = TriMesh(a.vertices, a.faces[:, [0, 2, 1]])
    with pytest.raises(TopologyError, match="face lists differ"):
        per_vertex_deformation(a, swapped)


def test_zero_deformation_is_identity(rng):
    mesh = icosphere(2)
    pts = rng.normal(size=(50, 3))
    out = canonicalize_cloud(pts, mesh, DeformationField(np.zeros((mesh.n_vertices, 3))))
    assert np.array_equal(out.points, pts)


def test_constant_deformation_translates(rng):
    mesh = icosphere(1)
    d = np.array([0.1, -0.2, 0.3])
    field = DeformationField(np.tile(d, (mesh.n_vertices, 1)))
    pts = rng.normal(size=(30, 3))
    assert np.allclose(canonicalize_cloud(pts, mesh, field).points, pts + d, atol=1e-12)


def test_vertices_map_to_canonical_vertices(rng):
    tracked, canon = _pair(rng)
    field = per_vertex_deformation(tracked, canon)
    out = canonicalize_cloud(tracked.vertices, tracked, field)
    assert np.allclose(out.points, canon.vertices, atol=1e-12)


def test_on_surface_points_land_on_canonical_surface(rng):
    tracked, canon = _pair(rng)
    field = per_vertex_deformation(tracked, canon)
    face = rng.integers(0, tracked.n_faces, 200)
    bary = rng.dirichlet([1, 1, 1], 200)
    out = canonicalize_cloud(tracked.evaluate(face, bary), tracked, field)
    assert np.allclose(out.points, canon.evaluate(face, bary), atol=1e-9)


def test_nearest_vertex_mode_uses_a_vertex_vector(rng):
    tracked, canon = _pair(rng)
    field = per_vertex_deformation(tracked, canon)
    pts = tracked.vertices[:10] * 1.0001
    disp = transfer_displacements(tracked, field, pts, NEAREST_VERTEX)
    assert np.allclose(disp, field.vectors[:10])
    with pytest.raises(ValueError):
        transfer_displacements(tracked, field, pts, "cubic")


def test_attach_point_on_face():
    mesh = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), [[0, 1, 2]])
    att = attach_point(mesh, [0.25, 0.25, 0.5])
    assert att.face == 0 and np.allclose(att.barycentric, [0.5, 0.25, 0.25])
    assert att.sq_distance == pytest.approx(0.25)


def test_field_length_must_match(rng):
    mesh = icosphere(1)
    with pytest.raises(TopologyError):
        canonicalize_cloud(rng.normal(size=(3, 3)), mesh, DeformationField(np.zeros((5, 3))))


def test_bake_with_zero_field_reproduces_world_map(rng):
    mesh = icosphere(2)
    cam = look_at((0, 0, 4), (0, 0, 0), fx=40, width=16, height=16)
    depth = rng.uniform(2.5, 3.5, size=(16, 16))
    mask = rng.random((16, 16)) > 0.2
    canon, m = bake_canonical_map(depth, mask, cam, mesh,
                                  DeformationField(np.zeros((mesh.n_vertices, 3))))
    assert np.array_equal(m, mask)
    assert np.allclose(canon[mask], point_map(depth, cam)[mask], atol=1e-12)
    assert not canon[~mask].any()
