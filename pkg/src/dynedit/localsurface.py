"""The edited local surface: lifting an edit to a mesh and compositing it into a field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriMesh, interpolate_attributes, intersect_rays, point_to_mesh_distance, unproject
from .scenefield import (RenderSettings, alpha, camera_rays, composite, march,
                         render_color, render_rays)


class EditError(ValueError):
    pass


@dataclass
class EditSpec:
    image: np.ndarray
    mask: np.ndarray
    camera: object
    time: float

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)[..., :3]
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.camera.height, self.camera.width
        if self.image.shape[:2] != (h, w) or self.mask.shape != (h, w):
            raise EditError(f"edit image/mask must be {h}x{w}")
        if not self.mask.any():
            raise EditError("edit mask is empty")
        if self.mask.all():
            raise EditError("edit mask covers the whole image; only partial edits are supported")


@dataclass
class SurfaceFieldParams:
    beta: float = 0.001
    gamma: float = None
    # quadrature nodes added around the nearest hit of each intersecting ray
    surface_samples: int = 1
    surface_halfwidth: float = 0.0

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = self.beta
        if self.beta <= 0 or self.gamma <= 0:
            raise EditError("beta and gamma must be positive")
        if self.surface_samples < 1:
            raise EditError("need at least one surface sample")

    @property
    def amplitude(self):
        return 1.0 / self.beta


@dataclass
class LocalSurface:
    mesh: TriMesh
    source_pixels: np.ndarray
    time: float

    @property
    def vertices(self):
        return self.mesh.vertices

    def at(self, vertices):
        """The same surface with moved vertices (e.g. warped to another frame)."""
        return LocalSurface(self.mesh.with_vertices(vertices), self.source_pixels, self.time)


def mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def lift_edit(edit, field, settings=None, edge_threshold=None):
    """Unproject the edit's bounding box through the field's depth into a textured mesh.

    Vertices inside the user mask get opacity 1, bounding-box padding 0. Faces
    with an edge longer than ``edge_threshold`` (a depth discontinuity) are
    dropped; the default is 4x the median neighbour spacing inside the mask.
    """
    settings = settings or RenderSettings()
    r0, r1, c0, c1 = mask_bbox(edit.mask)
    bh, bw = r1 - r0, c1 - c0
    if bh < 2 or bw < 2:
        raise EditError("edit region must span at least 2x2 pixels")
    ii, jj = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    pix = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    _, depth, valid, _ = render_rays(field, edit.camera, edit.time, settings, pixels=pix)
    inside = edit.mask[ii, jj].ravel()
    if np.any(inside & ~valid):
        raise EditError("masked pixel has no valid depth")

    verts = np.zeros((len(pix), 3))
    verts[valid] = unproject(edit.camera, pix[valid], depth[valid])
    grid = np.arange(len(pix)).reshape(bh, bw)

    def spacing(a, b):
        return np.linalg.norm(verts[a] - verts[b], axis=-1)

    if edge_threshold is None:
        m = edit.mask[r0:r1, c0:c1]
        lengths = np.concatenate([
            spacing(grid[:, :-1], grid[:, 1:])[m[:, :-1] & m[:, 1:]],
            spacing(grid[:-1, :], grid[1:, :])[m[:-1, :] & m[1:, :]],
        ])
        if lengths.size == 0:
            raise EditError("edit mask has no adjacent pixel pairs")
        edge_threshold = 4.0 * float(np.median(lengths))

    a = grid[:-1, :-1].ravel()
    b = grid[:-1, 1:].ravel()
    c = grid[1:, :-1].ravel()
    d = grid[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    ok = valid[faces].all(axis=1)
    tri = verts[faces]
    longest = np.max(np.stack([np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1),
                               np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1),
                               np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)]), axis=0)
    faces = faces[ok & (longest <= edge_threshold)]
    if len(faces) == 0:
        raise EditError("no faces survive the depth-discontinuity cut")

    used = np.unique(faces)
    remap = np.full(len(pix), -1)
    remap[used] = np.arange(len(used))
    colors = edit.image[ii, jj].reshape(-1, 3)[used]
    opac = inside[used].astype(np.float64)
    mesh = TriMesh(verts[used], remap[faces], colors, opac).drop_degenerate()
    return LocalSurface(mesh, pix[used], edit.time)


# ---------------------------------------------------------------------------
# fields derived from the mesh


def laplace_cdf(s, beta):
    return np.where(s <= 0, 0.5 * np.exp(np.minimum(s, 0) / beta), 1 - 0.5 * np.exp(-np.maximum(s, 0) / beta))


def density_from_distance(d, params):
    """Surface density alpha * Psi_beta(-d) for unsigned distance d >= 0."""
    return params.amplitude * laplace_cdf(-np.asarray(d, dtype=np.float64), params.beta)


def surface_density(mesh, x, params=None):
    params = params or SurfaceFieldParams()
    return density_from_distance(point_to_mesh_distance(mesh, x), params)


def _ray_span(ray):
    return ray.near, ray.far


def ray_hits(mesh, origins, dirs, near, far):
    """Nearest hit per ray plus interpolated colour/opacity and membership in R_h.

    A ray belongs to R_h when it hits a face whose interpolated opacity is above
    one half; rays that only meet bounding-box padding behave as misses.
    """
    face, dist, bary = intersect_rays(mesh, origins, dirs, near, far)
    color, opacity = interpolate_attributes(mesh, face, bary)
    in_rh = (face >= 0) & (opacity > 0.5)
    color[~in_rh] = 0.0
    return in_rh, dist, color, opacity


def mask_field(mesh, ray, x, params=None):
    """Mask value (0 or 1) at sample point(s) ``x`` on ``ray``."""
    params = params or SurfaceFieldParams()
    in_rh, _, _, _ = ray_hits(mesh, ray.origin[None], ray.direction[None], ray.near, ray.far)
    pts = np.atleast_2d(x)
    if not in_rh[0]:
        m = np.zeros(len(pts), dtype=np.int64)
    else:
        m = (point_to_mesh_distance(mesh, pts) < params.gamma).astype(np.int64)
    return m if np.ndim(x) > 1 else int(m[0])


def surface_color(mesh, ray, n_samples=1):
    """Per-sample surface colour along a ray, the hit opacity, and whether sigma^s is live."""
    in_rh, _, color, opacity = ray_hits(mesh, ray.origin[None], ray.direction[None], ray.near, ray.far)
    return np.repeat(color, n_samples, axis=0), float(opacity[0]), bool(in_rh[0])


# ---------------------------------------------------------------------------
# compositing


def composite_surface(sigma_d, color_d, sigma_s, color_s, mask, delta, background, use_mask=True):
    """Volume rendering of field + surface. Returns (rgb, weights, opacity).

    With the mask, samples are attributed wholly to one layer; without it the
    two densities simply add and colours mix by density.
    """
    if use_mask:
        m = mask.astype(np.float64)
        tau_d = sigma_d * delta * (1.0 - m)
        tau_s = sigma_s * delta * m
        tau = tau_d + tau_s
        acc = np.cumsum(tau, axis=1)
        trans = np.exp(-np.concatenate([np.zeros((len(tau), 1)), acc[:, :-1]], axis=1))
        wd = trans * alpha(sigma_d * delta) * (1.0 - m)
        ws = trans * alpha(sigma_s * delta) * m
    else:
        sig = sigma_d + sigma_s
        tau = sig * delta
        acc = np.cumsum(tau, axis=1)
        trans = np.exp(-np.concatenate([np.zeros((len(tau), 1)), acc[:, :-1]], axis=1))
        w = trans * alpha(tau)
        safe = np.where(sig > 0, sig, 1.0)
        wd = w * sigma_d / safe
        ws = w * sigma_s / safe
    rgb = (wd[..., None] * color_d).sum(axis=1) + (ws[..., None] * color_s).sum(axis=1)
    opacity = (wd + ws).sum(axis=1)
    rgb = rgb + (1.0 - opacity)[:, None] * np.asarray(background)
    return rgb, wd + ws, opacity


def composite_rays(field, mesh, camera, t, settings=None, params=None, pixels=None, seed=None,
                   use_mask=True, return_hits=False):
    """Composite render of arbitrary camera pixels; see :func:`composite_render`."""
    settings = settings or RenderSettings()
    params = params or SurfaceFieldParams()
    s = march(field, camera, t, settings, pixels, seed)
    cos = s["cos"]
    in_rh, dist, csurf, _ = ray_hits(mesh, s["origins"], s["dirs"], settings.near / cos, settings.far / cos)

    rgb = np.empty((len(cos), 3))
    miss = ~in_rh
    if np.any(miss):
        rgb[miss], _, _ = composite(s["sigma"][miss], s["color"][miss], s["delta"][miss],
                                    settings.background)
    hit = np.flatnonzero(in_rh)
    if len(hit):
        n_extra = params.surface_samples
        offs = (np.linspace(-params.surface_halfwidth, params.surface_halfwidth, n_extra)
                if n_extra > 1 else np.zeros(1))
        z_hit = (dist[hit] * cos[hit])[:, None] + offs[None, :] * cos[hit][:, None]
        z_hit = np.clip(z_hit, settings.near, settings.far)
        o, d = s["origins"][hit], s["dirs"][hit]
        extra_pts = o[:, None, :] + d[:, None, :] * (z_hit / cos[hit][:, None])[..., None]
        sig_e, col_e = field.query(extra_pts.reshape(-1, 3), t)
        z = np.concatenate([s["z"][hit], z_hit], axis=1)
        order = np.argsort(z, axis=1, kind="stable")
        take = lambda a: np.take_along_axis(a, order if a.ndim == 2 else order[..., None], axis=1)
        z = take(z)
        pts = take(np.concatenate([s["points"][hit], extra_pts], axis=1))
        sig_d = take(np.concatenate([s["sigma"][hit], sig_e.reshape(len(hit), -1)], axis=1))
        col_d = take(np.concatenate([s["color"][hit], col_e.reshape(len(hit), -1, 3)], axis=1))
        # base samples keep their own intervals; surface samples split one stratum
        # (a single hit sample) or the refinement window between them
        width = ((settings.far - settings.near) / settings.n_samples if n_extra == 1
                 else 2.0 * params.surface_halfwidth / n_extra)
        delta = take(np.concatenate([s["delta"][hit],
                                     np.broadcast_to((width / cos[hit])[:, None], z_hit.shape)], axis=1))
        dsurf = point_to_mesh_distance(mesh, pts.reshape(-1, 3)).reshape(z.shape)
        sig_s = density_from_distance(dsurf, params)
        mask = dsurf < params.gamma
        col_s = np.broadcast_to(csurf[hit][:, None, :], col_d.shape)
        rgb[hit], _, _ = composite_surface(sig_d, col_d, sig_s, col_s, mask, delta,
                                           settings.background, use_mask=use_mask)
    if return_hits:
        return rgb, in_rh
    return rgb


def composite_render(field, surface_mesh, camera, t, settings=None, params=None, seed=None,
                     use_mask=True):
    """(H, W, 3) render of the field with the (already warped) surface mesh inserted.

    Rays outside R_h take exactly the same arithmetic path as the plain field
    render, so they are bit-identical to :func:`render_color` under the same seed.
    """
    rgb = composite_rays(field, surface_mesh, camera, t, settings, params, seed=seed, use_mask=use_mask)
    return rgb.reshape(camera.height, camera.width, 3)


def rasterize(mesh, camera, settings=None):
    """Mesh-renderer output: per-pixel colour and opacity of the nearest visible face."""
    settings = settings or RenderSettings()
    origins, dirs, cos = camera_rays(camera)
    face, _, bary = intersect_rays(mesh, origins, dirs, settings.near / cos, settings.far / cos)
    color, opacity = interpolate_attributes(mesh, face, bary)
    H, W = camera.height, camera.width
    return color.reshape(H, W, 3), opacity.reshape(H, W)


def composite_render_no_occlusion(field, surface_mesh, camera, t, settings=None, seed=None):
    """Ablation: rasterise the surface and alpha-blend it over the field render, ignoring depth."""
    base = render_color(field, camera, t, settings, seed=seed)
    color, opacity = rasterize(surface_mesh, camera, settings)
    return opacity[..., None] * color + (1.0 - opacity[..., None]) * base
