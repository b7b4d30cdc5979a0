"""Dynamic radiance fields, analytic test scenes and the plain volume renderer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Camera, project

COLOR_SHELL = 0.05
SOLID_DENSITY = 500.0


class ConfigError(ValueError):
    pass


class DynamicField:
    """Time-varying density/colour field.

    Subclasses implement :meth:`query`; positions are (P,3), time a scalar.
    """

    bounds = (np.full(3, -1.0), np.full(3, 1.0))

    def query(self, x, t, d=None):
        raise NotImplementedError

    def query_vjp(self, x, t, g_sigma, g_color, h=1e-5):
        """Vector-Jacobian product of the query w.r.t. positions (central differences)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            sp, cp = self.query(x + e, t)
            sm, cm = self.query(x - e, t)
            out[:, k] = (g_sigma * (sp - sm) + np.sum(g_color * (cp - cm), axis=1)) / (2 * h)
        return out


# ---------------------------------------------------------------------------
# textures


def procedural_texture(kind="noise", resolution=128, seed=0, blur=1.0, checks=8):
    rng = np.random.default_rng(seed)
    if kind == "checker":
        ii, jj = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
        cell = ((ii * checks // resolution) + (jj * checks // resolution)) % 2
        tex = np.where(cell[..., None] == 1, [0.85, 0.8, 0.2], [0.15, 0.3, 0.7])
        return tex.astype(np.float64)
    if kind not in ("noise", "smooth"):
        raise ConfigError(f"unknown texture type {kind!r}")
    tex = rng.random((resolution, resolution, 3))
    sigma = blur if kind == "noise" else max(blur, resolution / 16)
    tex = np.stack([gaussian_filter(tex[..., c], sigma, mode="wrap") for c in range(3)], axis=-1)
    lo, hi = tex.min(), tex.max()
    return 0.1 + 0.8 * (tex - lo) / max(hi - lo, 1e-12)


def sample_texture(tex, uv):
    """Bilinear lookup with clamping; uv in [0,1]^2, u along columns."""
    h, w = tex.shape[:2]
    x = np.clip(uv[:, 0], 0.0, 1.0) * (w - 1)
    y = np.clip(uv[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * tex[y0, x0] + fx * (1 - fy) * tex[y0, x0 + 1]
            + (1 - fx) * fy * tex[y0 + 1, x0] + fx * fy * tex[y0 + 1, x0 + 1])


def load_texture(path):
    from .io import read_png

    try:
        return read_png(path)[..., :3]
    except FileNotFoundError as exc:
        raise ConfigError(f"texture file not found: {path}") from exc


# ---------------------------------------------------------------------------
# rigid parts


def rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass
class Part:
    """A rigid solid (box or sphere) with a texture and a closed-form motion.

    Pose at time t: x_world = Rot(axis, omega*t) @ (R0 @ x_local + p0 - pivot) + pivot + v*t.
    Boxes span [-hx,hx] x [-hy,hy] x [0, thickness] locally; their textured front
    face is local z = 0.
    """

    shape: str
    size: np.ndarray
    texture: np.ndarray
    p0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R0: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    omega: float = 0.0
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def pose(self, t):
        Rm = rotation(self.axis, self.omega * t)
        R = Rm @ self.R0
        p = Rm @ (self.p0 - self.pivot) + self.pivot + self.velocity * t
        return R, p

    def to_local(self, x, t):
        R, p = self.pose(t)
        return (x - p) @ R

    def to_world(self, xl, t):
        R, p = self.pose(t)
        return xl @ R.T + p

    def inside(self, xl, tol=0.0):
        if self.shape == "box":
            hx, hy, th = self.size
            return ((np.abs(xl[:, 0]) <= hx + tol) & (np.abs(xl[:, 1]) <= hy + tol)
                    & (xl[:, 2] >= -tol) & (xl[:, 2] <= th + tol))
        return np.linalg.norm(xl, axis=1) <= self.size[0] + tol

    def signed_distance(self, xl):
        if self.shape == "box":
            hx, hy, th = self.size
            c = np.array([0, 0, th / 2])
            q = np.abs(xl - c) - np.array([hx, hy, th / 2])
            return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        return np.linalg.norm(xl, axis=1) - self.size[0]

    def color(self, xl):
        if self.shape == "box":
            hx, hy, _ = self.size
            uv = np.stack([(xl[:, 0] + hx) / (2 * hx), (xl[:, 1] + hy) / (2 * hy)], axis=1)
        else:
            r = np.maximum(np.linalg.norm(xl, axis=1), 1e-12)
            lon = np.arctan2(xl[:, 1], xl[:, 0])
            lat = np.arcsin(np.clip(xl[:, 2] / r, -1, 1))
            uv = np.stack([(lon + np.pi) / (2 * np.pi), (lat + np.pi / 2) / np.pi], axis=1)
        return sample_texture(self.texture, uv)

    def ray_hit(self, o, d, t):
        """Entry distance of world rays into the part (inf on miss)."""
        R, p = self.pose(t)
        ol = (o - p) @ R
        dl = d @ R
        if self.shape == "sphere":
            r = self.size[0]
            b = np.sum(ol * dl, axis=1)
            c = np.sum(ol * ol, axis=1) - r * r
            disc = b * b - c
            s = -b - np.sqrt(np.maximum(disc, 0))
            return np.where((disc >= 0) & (s > 0), s, np.inf)
        hx, hy, th = self.size
        lo = np.array([-hx, -hy, 0.0])
        hi = np.array([hx, hy, th])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - ol) / dl
            t2 = (hi - ol) / dl
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


class AnalyticScene(DynamicField):
    """Union of rigid textured solids with exact correspondences."""

    def __init__(self, kind, parts, density=SOLID_DENSITY, bounds=None):
        self.kind = kind
        self.parts = list(parts)
        self.density = float(density)
        if bounds is not None:
            self.bounds = (np.asarray(bounds[0], float), np.asarray(bounds[1], float))

    @property
    def rigid(self):
        return True

    def query(self, x, t, d=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma = np.zeros(len(x))
        color = np.zeros((len(x), 3))
        free = np.ones(len(x), dtype=bool)
        uncoloured = np.ones(len(x), dtype=bool)
        local = [part.to_local(x, t) for part in self.parts]
        for part, xl in zip(self.parts, local):
            m = free & part.inside(xl)
            if np.any(m):
                sigma[m] = self.density
                color[m] = part.color(xl[m])
                free &= ~m
        uncoloured &= free
        # colour continues into a thin empty shell so that positional derivatives
        # of colour do not see a jump at the surface; zero density keeps renders unchanged
        for part, xl in zip(self.parts, local):
            m = uncoloured & part.inside(xl, tol=COLOR_SHELL)
            if np.any(m):
                color[m] = part.color(xl[m])
                uncoloured &= ~m
        return sigma, color

    def part_of(self, x, t):
        """Index of the part each point belongs to (nearest by signed distance)."""
        x = np.atleast_2d(x)
        sd = np.stack([p.signed_distance(p.to_local(x, t)) for p in self.parts], axis=1)
        return np.argmin(sd, axis=1)

    def gt_deform(self, x, t, t2, part=None):
        """Exact position at time ``t2`` of the material point at ``x`` at time ``t``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        part = self.part_of(x, t) if part is None else np.broadcast_to(part, (len(x),))
        out = np.empty_like(x)
        for k, p in enumerate(self.parts):
            m = part == k
            if np.any(m):
                out[m] = p.to_world(p.to_local(x[m], t), t2)
        return out

    def ray_cast(self, origins, dirs, t):
        """First surface point along each ray: (distance, part index); inf/-1 on miss."""
        hits = np.stack([p.ray_hit(origins, dirs, t) for p in self.parts], axis=1)
        part = np.argmin(hits, axis=1)
        dist = hits[np.arange(len(origins)), part]
        part = np.where(np.isfinite(dist), part, -1)
        return dist, part

    def surface_points(self, camera, t, pixels=None):
        pixels = camera.pixel_centers() if pixels is None else np.atleast_2d(pixels)
        dirs, _ = camera.directions(pixels)
        origins = np.broadcast_to(camera.center, dirs.shape)
        dist, part = self.ray_cast(origins, dirs, t)
        pts = origins + dirs * np.where(np.isfinite(dist), dist, 0.0)[:, None]
        return pts, part

    def homography(self, camera_i, camera_j, t_i, t_j, part=0):
        """Image homography induced by the front face of a box part between two frames."""
        p = self.parts[part]
        if p.shape != "box":
            raise ConfigError("homography needs a planar (box) part")
        R, pos = p.pose(t_i)
        n_w = R[:, 2]
        d_w = n_w @ pos
        Ri, ci = camera_i.R, camera_i.center
        n_c = Ri.T @ n_w
        d_c = d_w - n_w @ ci
        Rm_a, pa = p.pose(t_i)
        Rm_b, pb = p.pose(t_j)
        Rm = Rm_b @ Rm_a.T
        tm = pb - Rm @ pa
        A = camera_j.R.T @ Rm @ Ri
        b = camera_j.R.T @ (Rm @ ci + tm - camera_j.center)
        return camera_j.K @ (A + np.outer(b, n_c) / d_c) @ np.linalg.inv(camera_i.K)


# ---------------------------------------------------------------------------
# scene construction


def _vec(d, key, default):
    return np.asarray(d.get(key, default), dtype=np.float64)


def _texture_from(cfg, base_dir=None, default_seed=0):
    if cfg is None:
        cfg = {}
    if isinstance(cfg, str):
        cfg = {"path": cfg}
    if "path" in cfg:
        import os

        path = cfg["path"]
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return load_texture(path)
    return procedural_texture(cfg.get("type", "noise"), int(cfg.get("resolution", 128)),
                              int(cfg.get("seed", default_seed)), float(cfg.get("blur", 1.0)),
                              int(cfg.get("checks", 8)))


SCENE_KINDS = ("textured-plane-translation", "textured-plane-homography",
               "orbiting-sphere", "two-part-articulated")


def make_scene(cfg, base_dir=None):
    """Build an :class:`AnalyticScene` from a config mapping."""
    kind = cfg.get("kind")
    if kind not in SCENE_KINDS:
        raise ConfigError(f"unknown scene kind {kind!r}")
    density = float(cfg.get("density", SOLID_DENSITY))
    if density <= 0:
        raise ConfigError("density must be positive")
    plane = cfg.get("plane", {})
    half = _vec(plane, "half_size", [1.6, 1.6])
    th = float(plane.get("thickness", 0.2))
    center = _vec(plane, "center", [0.0, 0.0, 0.0])
    tex = _texture_from(cfg.get("texture"), base_dir)

    if kind == "textured-plane-translation":
        parts = [Part("box", np.array([*half, th]), tex, p0=center,
                      velocity=_vec(cfg, "velocity", [0.02, 0.0, 0.0]))]
    elif kind == "textured-plane-homography":
        parts = [Part("box", np.array([*half, th]), tex, p0=center,
                      velocity=_vec(cfg, "velocity", [0.0, 0.0, 0.0]),
                      axis=_vec(cfg, "axis", [0.0, 1.0, 0.0]),
                      omega=float(cfg.get("angular_rate", 0.01)),
                      pivot=_vec(cfg, "pivot", center))]
    elif kind == "orbiting-sphere":
        sph = cfg.get("sphere", {})
        stex = _texture_from(sph.get("texture", {"type": "checker", "checks": 6}), base_dir)
        orbit_c = _vec(sph, "orbit_center", [0.0, 0.0, -0.6])
        parts = [
            Part("sphere", np.array([float(sph.get("radius", 0.3))]), stex,
                 p0=orbit_c + _vec(sph, "offset", [0.6, 0.0, 0.0]),
                 axis=_vec(sph, "axis", [0.0, 1.0, 0.0]) if "axis" in sph else np.array([0.0, 0.0, 1.0]),
                 omega=float(sph.get("angular_rate", 0.1)), pivot=orbit_c),
            Part("box", np.array([*half, th]), tex, p0=center),
        ]
    else:
        arm = cfg.get("arm", {})
        atex = _texture_from(arm.get("texture", {"type": "noise", "seed": 7}), base_dir)
        ahalf = _vec(arm, "half_size", [0.5, 0.25])
        ap0 = _vec(arm, "center", [0.5, 0.0, -0.3])
        parts = [
            Part("box", np.array([*ahalf, th]), atex, p0=ap0,
                 axis=_vec(arm, "axis", [0.0, 0.0, 1.0]),
                 omega=float(arm.get("angular_rate", 0.02)),
                 pivot=_vec(arm, "hinge", ap0 - np.array([ahalf[0], 0.0, 0.0]))),
            Part("box", np.array([*half, th]), tex, p0=center),
        ]
    bounds = cfg.get("bounds")
    return AnalyticScene(kind, parts, density,
                         bounds=None if bounds is None else (bounds[0], bounds[1]))


def make_camera(cfg):
    cfg = cfg or {}
    return Camera.look_at(cfg.get("eye", [0.0, 0.0, -2.5]), cfg.get("target", [0.0, 0.0, 0.0]),
                          cfg.get("up", [0.0, -1.0, 0.0]), float(cfg.get("focal", 80.0)),
                          int(cfg.get("width", 64)), int(cfg.get("height", 64)))


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderSettings:
    n_samples: int = 128
    near: float = 1.5
    far: float = 3.5
    jitter: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    depth_mode: str = "expected"
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError("need at least 2 samples per ray")
        if not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")
        if self.depth_mode not in ("expected", "median"):
            raise ConfigError(f"unknown depth mode {self.depth_mode!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


def sample_depths(n_rays, settings, seed=None):
    """Stratified camera-frame depths (R, N): bin centres, or jittered within bins."""
    N = settings.n_samples
    edges = np.linspace(settings.near, settings.far, N + 1)
    if settings.jitter:
        rng = np.random.default_rng(settings.seed if seed is None else seed)
        u = rng.random((n_rays, N))
    else:
        u = np.full((n_rays, N), 0.5)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def interval_lengths(z, near, far):
    """Length of the depth interval each sample stands for (Voronoi cells on [near, far])."""
    mid = 0.5 * (z[:, 1:] + z[:, :-1])
    lo = np.concatenate([np.full((len(z), 1), near), mid], axis=1)
    hi = np.concatenate([mid, np.full((len(z), 1), far)], axis=1)
    return hi - lo


def alpha(x):
    return 1.0 - np.exp(-x)


def composite(sigma, color, dist, background):
    """Volume rendering sum. Returns (rgb, weights, opacity)."""
    tau = sigma * dist
    acc = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((len(tau), 1)), acc[:, :-1]], axis=1))
    w = trans * alpha(tau)
    opacity = w.sum(axis=1)
    rgb = (w[..., None] * color).sum(axis=1) + (1.0 - opacity)[:, None] * np.asarray(background)
    return rgb, w, opacity


def camera_rays(camera, pixels=None):
    pixels = camera.pixel_centers() if pixels is None else np.atleast_2d(pixels)
    dirs, cos = camera.directions(pixels)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs, cos


def march(field, camera, t, settings, pixels=None, seed=None):
    """Sample the field along camera rays. Returns a dict of per-sample arrays."""
    origins, dirs, cos = camera_rays(camera, pixels)
    z = sample_depths(len(dirs), settings, seed)
    dist_along = z / cos[:, None]
    pts = origins[:, None, :] + dirs[:, None, :] * dist_along[..., None]
    sigma, color = field.query(pts.reshape(-1, 3), t)
    R, N = z.shape
    seglen = interval_lengths(z, settings.near, settings.far) / cos[:, None]
    return {"origins": origins, "dirs": dirs, "cos": cos, "z": z, "points": pts,
            "sigma": sigma.reshape(R, N), "color": color.reshape(R, N, 3), "delta": seglen}


def depth_from_weights(w, z, opacity, mode="expected", min_opacity=1e-3):
    valid = opacity >= min_opacity
    if mode == "expected":
        depth = np.where(valid, (w * z).sum(axis=1) / np.where(valid, opacity, 1.0), 0.0)
    else:
        cw = np.cumsum(w, axis=1)
        k = np.argmax(cw >= 0.5 * opacity[:, None], axis=1)
        depth = np.where(valid, z[np.arange(len(z)), k], 0.0)
    return depth, valid


def render_rays(field, camera, t, settings, pixels=None, seed=None):
    s = march(field, camera, t, settings, pixels, seed)
    rgb, w, opacity = composite(s["sigma"], s["color"], s["delta"], settings.background)
    depth, valid = depth_from_weights(w, s["z"], opacity, settings.depth_mode)
    return rgb, depth, valid, opacity


def render_color(field, camera, t, settings=None, seed=None):
    """(H, W, 3) image of the field at time ``t``."""
    settings = settings or RenderSettings()
    rgb, _, _, _ = render_rays(field, camera, t, settings, seed=seed)
    return rgb.reshape(camera.height, camera.width, 3)


def render_depth(field, camera, t, settings=None, seed=None):
    """(H, W) camera-frame depth and (H, W) validity mask."""
    settings = settings or RenderSettings()
    _, depth, valid, _ = render_rays(field, camera, t, settings, seed=seed)
    return depth.reshape(camera.height, camera.width), valid.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# ground truth


def gt_flow(scene, camera_i, camera_j, t_i, t_j):
    """(H, W, 2) optical flow of the surface seen at each frame-i pixel, and validity."""
    pix = camera_i.pixel_centers()
    pts, part = scene.surface_points(camera_i, t_i, pix)
    valid = part >= 0
    flow = np.zeros((len(pix), 2))
    if np.any(valid):
        moved = scene.gt_deform(pts[valid], t_i, t_j, part[valid])
        p_cam = (moved - camera_j.center) @ camera_j.R
        front = p_cam[:, 2] > 1e-9
        idx = np.flatnonzero(valid)
        ok = idx[front]
        pj, _ = project(camera_j, moved[front])
        flow[ok] = pj - pix[ok]
        valid[idx[~front]] = False
    H, W = camera_i.height, camera_i.width
    return flow.reshape(H, W, 2), valid.reshape(H, W)


def gt_correspondence(scene, camera_r, camera_t, t_r, t, pixels):
    """Where the surface points seen at ``pixels`` in the reference view land at time ``t``."""
    pts, part = scene.surface_points(camera_r, t_r, pixels)
    valid = part >= 0
    out = np.zeros((len(pts), 2))
    if np.any(valid):
        moved = scene.gt_deform(pts[valid], t_r, t, part[valid])
        p_cam = (moved - camera_t.center) @ camera_t.R
        front = p_cam[:, 2] > 1e-9
        idx = np.flatnonzero(valid)
        pj, _ = project(camera_t, moved[front])
        out[idx[front]] = pj
        valid[idx[~front]] = False
    inside = (out[:, 0] >= 0) & (out[:, 0] < camera_t.width) & (out[:, 1] >= 0) & (out[:, 1] < camera_t.height)
    return out, valid & inside

