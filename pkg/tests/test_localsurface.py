import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import EmptyField, SlabField
from dynedit.geometry import Ray, TriMesh, project
from dynedit.localsurface import (EditError, EditSpec, SurfaceFieldParams, composite_render,
                                  composite_render_no_occlusion, composite_surface,
                                  density_from_distance, lift_edit, mask_field, surface_color,
                                  surface_density)
from dynedit.scenefield import DynamicField, RenderSettings, make_scene, render_color

DELTA = 2.0 / 128


class CliffField(DynamicField):
    """Opaque wall at depth 2.0 left of x = 0 and at depth 3.0 right of it."""

    def query(self, x, t, d=None):
        x = np.atleast_2d(x)
        depth = np.where(x[:, 0] < 0, 2.0, 3.0)
        inside = (x[:, 2] + 2.5 >= depth) & (x[:, 2] + 2.5 < depth + 0.2)
        col = np.where(x[:, 0:1] < 0, [[1.0, 0, 0]], [[0, 0, 1.0]])
        return np.where(inside, 500.0, 0.0), col * inside[:, None]


def box_mask(r, c, h, w, size=64):
    m = np.zeros((size, size), dtype=bool)
    m[r:r + h, c:c + w] = True
    return m


def plane_edit(camera, mask, color=(1.0, 0.0, 0.0), t=0.0):
    img = np.zeros((64, 64, 3))
    img[mask] = color
    return EditSpec(img, mask, camera, t)


@pytest.fixture
def plane():
    return SlabField([(2.5, 2.7, 500.0, (0.2, 0.6, 0.3))])


def test_two_by_two_patch(camera, plane):
    surf = lift_edit(plane_edit(camera, box_mask(30, 30, 2, 2)), plane)
    assert len(surf.vertices) == 4 and len(surf.mesh.faces) == 2
    _, z = project(camera, surf.vertices)
    assert np.all(np.abs(z - 2.5) < DELTA)


def test_vertices_reproject_to_source_pixels(camera, plane):
    surf = lift_edit(plane_edit(camera, box_mask(20, 25, 7, 9)), plane)
    pix, _ = project(camera, surf.vertices)
    assert np.max(np.abs(pix - surf.source_pixels)) < 0.5
    assert set(np.unique(surf.mesh.opacities)) <= {0.0, 1.0}


def test_padding_vertices_are_transparent(camera, plane):
    m = box_mask(20, 20, 6, 6)
    m[20, 20] = False
    surf = lift_edit(plane_edit(camera, m), plane)
    assert len(surf.vertices) == 36
    assert surf.mesh.opacities.sum() == 35


def test_depth_cliff_is_cut(camera):
    field = CliffField()
    surf = lift_edit(plane_edit(camera, box_mask(28, 26, 6, 12)), field)
    # no face spans the two walls
    tri = surf.vertices[surf.mesh.faces]
    x_sign = np.sign(tri[..., 0])
    assert np.all(np.abs(x_sign.sum(axis=1)) == 3)
    assert len(surf.mesh.faces) > 0


def test_edit_contracts(camera, plane):
    with pytest.raises(EditError):
        lift_edit(plane_edit(camera, box_mask(30, 30, 1, 1)), plane)
    with pytest.raises(EditError):
        EditSpec(np.zeros((64, 64, 3)), np.zeros((64, 64), bool), camera, 0.0)
    with pytest.raises(EditError):
        EditSpec(np.zeros((64, 64, 3)), np.ones((64, 64), bool), camera, 0.0)
    with pytest.raises(EditError):
        EditSpec(np.zeros((32, 64, 3)), box_mask(0, 0, 2, 2), camera, 0.0)
    with pytest.raises(EditError):
        lift_edit(plane_edit(camera, box_mask(30, 30, 3, 3)), EmptyField())


def test_density_values():
    p = SurfaceFieldParams()
    assert density_from_distance(0.0, p) == 500.0
    assert density_from_distance(0.001, p) == pytest.approx(183.93972058572118, rel=1e-12)
    d = np.linspace(0, 0.05, 1000)
    s = density_from_distance(d, p)
    assert np.all(np.diff(s) < 0) and s[-1] < 1e-18


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.1), st.floats(0, 1.0), st.floats(0, 1.0))
def test_density_is_monotone_and_bounded(beta, d1, d2):
    p = SurfaceFieldParams(beta=beta)
    lo, hi = sorted((d1, d2))
    assert density_from_distance(lo, p) >= density_from_distance(hi, p)
    assert 0 <= density_from_distance(hi, p) <= 0.5 / beta


def test_mask_field_cases():
    mesh = TriMesh([[-1, -1, 1], [1, -1, 1], [0, 1, 1]], [[0, 1, 2]])
    p = SurfaceFieldParams()
    hit_ray = Ray([0, 0, 0], [0, 0, 1.0])
    assert mask_field(mesh, hit_ray, [0, 0, 1.0], p) == 1
    assert mask_field(mesh, hit_ray, [0, 0, 1.0 - 2 * p.gamma], p) == 0
    d = np.array([0.0, 2.0, 1.0])
    miss = Ray([5.0, 0, 0], d / np.linalg.norm(d))
    assert mask_field(mesh, miss, [0.95, 0.0, 1.0 + 0.5 * p.gamma], p) == 0


def test_surface_color_cases():
    red = TriMesh([[-1, -1, 1], [1, -1, 1], [0, 1, 1]], [[0, 1, 2]], colors=np.tile([1.0, 0, 0], (3, 1)))
    c, o, live = surface_color(red, Ray([0, 0, 0], [0, 0, 1.0]), n_samples=4)
    np.testing.assert_array_equal(c, np.tile([1.0, 0, 0], (4, 1)))
    assert live and o == 1.0
    c, _, live = surface_color(red, Ray([5.0, 0, 0], [0, 0, 1.0]))
    assert not live and np.all(c == 0)
    pad = TriMesh(red.vertices, red.faces, red.colors, np.zeros(3))
    _, o, live = surface_color(pad, Ray([0, 0, 0], [0, 0, 1.0]))
    assert not live and o == 0.0


def test_composite_two_samples_by_hand():
    sd = np.array([[1.0, 2.0]])
    cd = np.array([[[0, 1.0, 0], [0, 0, 1.0]]])
    ss = np.array([[3.0, 0.0]])
    cs = np.array([[[1.0, 0, 0], [1.0, 0, 0]]])
    m = np.array([[1, 0]])
    delta = np.array([[0.5, 0.5]])
    rgb, _, _ = composite_surface(sd, cd, ss, cs, m, delta, (1, 1, 1), use_mask=True)
    np.testing.assert_allclose(rgb[0], [0.858954838475469, 0.08208499862389876, 0.2231301601484298],
                               rtol=1e-12)
    rgb, _, _ = composite_surface(sd, cd, ss, cs, m, delta, (1, 1, 1), use_mask=False)
    np.testing.assert_allclose(rgb[0], [0.6982856059404044, 0.2659532475587108, 0.1353352832366127],
                               rtol=1e-12)


def test_zero_mask_degenerates_to_field():
    rng = np.random.default_rng(3)
    sd = rng.random((5, 7)) * 4
    cd = rng.random((5, 7, 3))
    from dynedit.scenefield import composite
    delta = rng.random((5, 7))
    a, _, _ = composite_surface(sd, cd, rng.random((5, 7)), rng.random((5, 7, 3)),
                                np.zeros((5, 7)), delta, (0.1, 0.2, 0.3))
    b, _, _ = composite(sd, cd, delta, (0.1, 0.2, 0.3))
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_locality_bit_exact(camera):
    scene = make_scene({"kind": "orbiting-sphere"})
    st_ = RenderSettings(jitter=True)
    img = np.zeros((64, 64, 3))
    mask = box_mask(24, 24, 10, 10)
    img[mask] = [1, 0, 0]
    surf = lift_edit(EditSpec(img, mask, camera, 0.0), scene, st_)
    base = render_color(scene, camera, 0.0, st_, seed=11)
    comp = composite_render(scene, surf.mesh, camera, 0.0, st_, seed=11)
    far = ~np.pad(mask, 1)[:-2, :-2] & ~np.pad(mask, 1)[2:, 2:]
    far &= ~np.pad(mask, 1)[1:-1, 1:-1]
    assert np.array_equal(base[far], comp[far])


def test_round_trip_reference_view(camera, plane):
    mask = box_mask(27, 27, 10, 10)
    rng = np.random.default_rng(0)
    img = render_color(plane, camera, 0.0)
    img[mask] = rng.random((mask.sum(), 3))
    surf = lift_edit(EditSpec(img, mask, camera, 0.0), plane)
    out = composite_render(plane, surf.mesh, camera, 0.0)
    assert np.max(np.abs(out[mask] - img[mask])) < 2 / 255
    assert np.array_equal(out[~mask], render_color(plane, camera, 0.0)[~mask])


def test_surface_in_free_space(camera):
    mesh = TriMesh([[-1, -1, 0.0], [1, -1, 0.0], [0, 1, 0.0]], [[0, 1, 2]],
                   colors=np.tile([0.2, 0.9, 0.4], (3, 1)))
    out = composite_render(EmptyField(), mesh, camera, 0.0)
    np.testing.assert_allclose(out[32, 32], [0.2, 0.9, 0.4], atol=1e-3)


def test_no_occlusion_agrees_without_occluder(camera, plane):
    mask = box_mask(27, 27, 10, 10)
    surf = lift_edit(plane_edit(camera, mask, (0.9, 0.1, 0.1)), plane)
    a = composite_render(plane, surf.mesh, camera, 0.0)
    b = composite_render_no_occlusion(plane, surf.mesh, camera, 0.0)
    assert np.max(np.abs(a - b)) < 2 / 255


def test_no_occlusion_shows_hidden_edit(camera, plane):
    mask = box_mask(27, 27, 10, 10)
    surf = lift_edit(plane_edit(camera, mask, (0.9, 0.1, 0.1)), plane)
    occluded = SlabField([(2.0, 2.1, 500.0, (0.1, 0.1, 0.9)), (2.5, 2.7, 500.0, (0.2, 0.6, 0.3))])
    a = composite_render(occluded, surf.mesh, camera, 0.0)
    b = composite_render_no_occlusion(occluded, surf.mesh, camera, 0.0)
    np.testing.assert_allclose(a[mask], np.tile([0.1, 0.1, 0.9], (100, 1)), atol=1e-3)
    np.testing.assert_allclose(b[mask], np.tile([0.9, 0.1, 0.1], (100, 1)), atol=1e-3)


def test_surface_beyond_far_plane(camera, plane):
    mesh = TriMesh([[-3, -3, 5.0], [3, -3, 5.0], [0, 3, 5.0]], [[0, 1, 2]])
    base = render_color(plane, camera, 0.0)
    assert np.array_equal(composite_render(plane, mesh, camera, 0.0), base)
    assert np.array_equal(composite_render_no_occlusion(plane, mesh, camera, 0.0), base)


def test_surface_density_uses_mesh_distance():
    mesh = TriMesh([[-1, -1, 0.0], [1, -1, 0.0], [0, 1, 0.0]], [[0, 1, 2]])
    s = surface_density(mesh, np.array([[0, 0, 0.0], [0, 0, 0.001]]))
    np.testing.assert_allclose(s, [500.0, 183.93972058572118])
