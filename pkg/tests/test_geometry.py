import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynedit.geometry import (Camera, GeometryError, HitRecord, Ray, TriMesh, interpolate_color,
                              intersect, intersect_rays, intersect_rays_brute, point_to_mesh_distance,
                              point_to_mesh_distance_brute, project, read_ply, unproject, write_ply)


def identity_camera(f=50.0, w=64, h=48):
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    return Camera(K, np.eye(4), w, h)


def random_mesh(rng, n=30):
    tri = rng.normal(size=(n, 3, 3))
    return TriMesh(tri.reshape(-1, 3), np.arange(3 * n).reshape(n, 3))


def test_principal_point_maps_to_axis():
    cam = identity_camera()
    p = unproject(cam, [[32.0, 24.0]], [2.0])
    np.testing.assert_allclose(p, [[0, 0, 2.0]])
    pix, z = project(cam, p)
    np.testing.assert_allclose(pix, [[32.0, 24.0]])
    assert z[0] == pytest.approx(2.0)


def test_pixel_one_focal_right():
    cam = identity_camera(f=50.0)
    p = unproject(cam, [[32.0 + 50.0, 24.0]], [3.0])
    np.testing.assert_allclose(p, [[3.0, 0, 3.0]])
    np.testing.assert_allclose(project(cam, p)[0], [[82.0, 24.0]])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 64), st.floats(0, 48), st.floats(0.1, 20), st.integers(0, 2 ** 31 - 1))
def test_project_unproject_round_trip(u, v, z, seed):
    rng = np.random.default_rng(seed)
    eye = rng.normal(size=3)
    cam = Camera.look_at(eye, eye + rng.normal(size=3) + [0, 0, 3], [0, -1, 0], 60.0, 64, 48)
    pix, depth = project(cam, unproject(cam, [[u, v]], [z]))
    np.testing.assert_allclose(pix, [[u, v]], atol=1e-8)
    assert depth[0] == pytest.approx(z, rel=1e-10)


def test_camera_contracts():
    with pytest.raises(GeometryError):
        Camera(np.diag([-1.0, 1, 1]), np.eye(4), 8, 8)
    bad = np.eye(4)
    bad[0, 0] = -1
    with pytest.raises(GeometryError):
        Camera(np.eye(3), bad, 8, 8)
    with pytest.raises(GeometryError):
        project(identity_camera(), [[0, 0, -1.0]])
    cam = Camera.look_at([1, 2, 3], [0, 0, 0], [0, -1, 0], 80, 64, 64)
    assert np.linalg.det(cam.R) == pytest.approx(1.0)
    np.testing.assert_allclose(cam.R.T @ cam.R, np.eye(3), atol=1e-12)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.c2w, cam.c2w)


def test_ray_through_centroid():
    mesh = TriMesh([[0, 0, 1], [1, 0, 1], [0, 1, 1]], [[0, 1, 2]])
    c = np.array([1 / 3, 1 / 3, 0.0])
    hit = intersect(mesh, Ray(c, [0, 0, 1.0]))
    assert hit.face == 0 and hit.distance == pytest.approx(1.0)
    np.testing.assert_allclose(hit.bary, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_parallel_ray_misses():
    mesh = TriMesh([[0, 0, 1], [1, 0, 1], [0, 1, 1]], [[0, 1, 2]])
    assert intersect(mesh, Ray([0.2, 0.2, 0.5], [1.0, 0, 0])) is None


def test_shared_vertex_lowest_face_wins():
    v = [[0, 0, 1], [1, 0, 1], [0, 1, 1], [-1, 0, 1], [0, -1, 1]]
    mesh = TriMesh(v, [[0, 3, 4], [0, 1, 2], [0, 2, 3]])
    hit = intersect(mesh, Ray([0, 0, 0], [0, 0, 1.0]))
    assert hit.face == 0


def test_interpolate_color():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]],
                   colors=np.eye(3), opacities=[0.0, 0.0, 0.0])
    c, o = interpolate_color(mesh, HitRecord(0, np.array([1.0, 0, 0]), 1.0))
    np.testing.assert_array_equal(c, [1, 0, 0])
    c, o = interpolate_color(mesh, HitRecord(0, np.full(3, 1 / 3), 1.0))
    np.testing.assert_allclose(c, [1 / 3, 1 / 3, 1 / 3])
    assert o == 0.0


def test_distance_examples():
    big = TriMesh([[-10, -10, 0], [10, -10, 0], [0, 10, 0]], [[0, 1, 2]])
    assert point_to_mesh_distance(big, [0.5, 0.5, 0.0]) == pytest.approx(0.0, abs=1e-12)
    assert point_to_mesh_distance(big, [0.5, 0.5, 0.7]) == pytest.approx(0.7)
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    # nearest feature is the hypotenuse edge
    p = np.array([1.0, 1.0, 0.5])
    foot = np.array([0.5, 0.5, 0.0])
    assert point_to_mesh_distance(tri, p) == pytest.approx(np.linalg.norm(p - foot))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_bvh_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng)
    o = rng.normal(size=(40, 3)) * 2
    d = rng.normal(size=(40, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    f1, t1, b1 = intersect_rays(mesh, o, d)
    f2, t2, b2 = intersect_rays_brute(mesh, o, d)
    np.testing.assert_array_equal(f1, f2)
    hit = f1 >= 0
    np.testing.assert_allclose(t1[hit], t2[hit], rtol=1e-10)
    pts = rng.normal(size=(40, 3)) * 2
    np.testing.assert_allclose(point_to_mesh_distance(mesh, pts),
                               point_to_mesh_distance_brute(mesh, pts), atol=1e-10)


def test_mesh_contracts(tmp_path):
    with pytest.raises(GeometryError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(GeometryError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 2]], colors=np.zeros((2, 3)))
    m = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert len(m.drop_degenerate().faces) == 1
    write_ply(tmp_path / "m.ply", m)
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)
