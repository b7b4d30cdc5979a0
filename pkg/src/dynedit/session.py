"""An editing session: scene, per-frame cameras, observations, flow provider and the lifted edit."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .features import PatchDescriptor, bilinear
from .geometry import project
from .localsurface import (EditSpec, LocalSurface, SurfaceFieldParams, composite_render,
                           composite_render_no_occlusion, lift_edit)
from .scenefield import (ConfigError, RenderSettings, gt_flow, make_camera, make_scene,
                         render_color, render_depth)

DEFAULT_CONFIG = {
    "scene": {"kind": "textured-plane-translation"},
    "camera": {},
    "frames": 30,
    "render": {},
    "edit": {"frame": 15, "view": 0, "box": [27, 27, 10, 10], "pattern": "checker",
             "color": [1.0, 0.1, 0.1], "cell": 2},
    "surface": {},
    "train": {},
    "seed": 0,
}


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(cfg):
    n = cfg.get("frames")
    if not isinstance(n, int) or n < 2:
        raise ConfigError("frame count must be an integer >= 2")
    ed = cfg.get("edit", {})
    if not 0 <= int(ed.get("frame", 0)) < n:
        raise ConfigError("edit frame out of range")
    views = cfg.get("views") or [cfg.get("camera", {})]
    if not 0 <= int(ed.get("view", 0)) < len(views):
        raise ConfigError("edit view out of range")
    RenderSettings.from_dict(cfg.get("render"))
    SurfaceFieldParams(**{k: v for k, v in cfg.get("surface", {}).items() if k != "edge_threshold"})


def frame_cameras(cam_cfg, n_frames):
    """Per-frame cameras; ``eye_velocity`` moves the camera linearly (0 = static)."""
    vel = np.asarray(cam_cfg.get("eye_velocity", [0.0, 0.0, 0.0]), dtype=np.float64)
    eye = np.asarray(cam_cfg.get("eye", [0.0, 0.0, -2.5]), dtype=np.float64)
    target = np.asarray(cam_cfg.get("target", [0.0, 0.0, 0.0]), dtype=np.float64)
    out = []
    for t in range(n_frames):
        c = dict(cam_cfg)
        c["eye"] = (eye + vel * t).tolist()
        c["target"] = (target + vel * t).tolist()
        out.append(make_camera(c))
    return out


def edit_pattern(shape, pattern="checker", color=(1.0, 0.1, 0.1), cell=2, seed=0):
    h, w = shape
    color = np.asarray(color, dtype=np.float64)
    if pattern == "solid":
        return np.broadcast_to(color, (h, w, 3)).copy()
    if pattern == "checker":
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        on = ((ii // cell + jj // cell) % 2 == 0)[..., None]
        return np.where(on, color, 1.0 - color)
    if pattern == "noise":
        return np.random.default_rng(seed).random((h, w, 3))
    raise ConfigError(f"unknown edit pattern {pattern!r}")


def synth_edit(frame_image, edit_cfg, seed=0):
    """Edited image and mask from a box + pattern description."""
    H, W = frame_image.shape[:2]
    r, c, h, w = (int(v) for v in edit_cfg["box"])
    if h < 1 or w < 1 or r < 0 or c < 0 or r + h > H or c + w > W:
        raise ConfigError("edit box outside the image")
    mask = np.zeros((H, W), dtype=bool)
    mask[r:r + h, c:c + w] = True
    img = frame_image.copy()
    img[mask] = edit_pattern((h, w), edit_cfg.get("pattern", "checker"),
                             edit_cfg.get("color", (1.0, 0.1, 0.1)), int(edit_cfg.get("cell", 2)),
                             seed).reshape(-1, 3)
    return img, mask


class AnalyticFlowProvider:
    """Optical flow between neighbouring frames from the analytic scene."""

    def __init__(self, scene):
        self.scene = scene

    def __call__(self, cam_i, cam_j, t_i, t_j):
        return gt_flow(self.scene, cam_i, cam_j, t_i, t_j)


@dataclass
class EditSession:
    field: object
    cameras: list
    settings: RenderSettings
    frames: list
    ref_frame: int
    ref_view: int = 0
    edit: EditSpec = None
    surface: LocalSurface = None
    surface_params: SurfaceFieldParams = field(default_factory=SurfaceFieldParams)
    flow_provider: object = None
    descriptor: PatchDescriptor = field(default_factory=PatchDescriptor)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self):
        return len(self.cameras[0])

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def width(self):
        return self.cameras[0][0].width

    @property
    def height(self):
        return self.cameras[0][0].height

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def depth(self, view, t):
        return self._cached(("depth", view, t),
                            lambda: render_depth(self.field, self.cameras[view][t], t, self.settings))

    def flow(self, view, t, direction):
        """(H, W, 2) optical flow from frame t to t+direction (zeros/invalid off the ends)."""
        j = t + direction
        if not 0 <= j < self.n_frames:
            return np.zeros((self.height, self.width, 2)), np.zeros((self.height, self.width), bool)
        if self.flow_provider is None:
            raise ConfigError("session has no flow provider")
        return self._cached(("flow", view, t, direction),
                            lambda: self.flow_provider(self.cameras[view][t], self.cameras[view][j], t, j))

    def features(self, view, t):
        return self._cached(("feat", view, t), lambda: self.descriptor.extract(self.frames[view][t]))

    def track_boxes(self, margin=4):
        """Per-(view, frame) pixel boxes that follow the edit region by chaining optical flow.

        Returns an int array (views, frames, 4) of [x0, y0, x1, y1) bounds.
        """
        def build():
            out = np.zeros((self.n_views, self.n_frames, 4), dtype=np.int64)
            for v in range(self.n_views):
                pix, _ = project(self.cameras[v][self.ref_frame], self.surface.vertices)
                track = {self.ref_frame: pix.copy()}
                for direction in (1, -1):
                    p = pix.copy()
                    t = self.ref_frame
                    while 0 <= t + direction < self.n_frames:
                        fl, _ = self.flow(v, t, direction)
                        p = p + bilinear(fl, p)[0]
                        t += direction
                        track[t] = p.copy()
                for t, p in track.items():
                    lo = np.floor(p.min(axis=0) - margin).astype(np.int64)
                    hi = np.ceil(p.max(axis=0) + margin).astype(np.int64)
                    out[v, t] = [max(lo[0], 0), max(lo[1], 0), min(hi[0], self.width),
                                 min(hi[1], self.height)]
            return out

        return self._cached(("boxes", margin), build)

    def reference_camera(self):
        return self.cameras[self.ref_view][self.ref_frame]


def build_session(cfg, base_dir=None, with_edit=True):
    """Synthesise observations for a config and lift its edit."""
    cfg = merge(DEFAULT_CONFIG, cfg)
    validate_config(cfg)
    scene = make_scene(cfg["scene"], base_dir)
    n = cfg["frames"]
    settings = RenderSettings.from_dict(cfg.get("render"))
    views = cfg.get("views") or [cfg.get("camera", {})]
    cameras = [frame_cameras(vc, n) for vc in views]
    frames = [[render_color(scene, cams[t], t, settings) for t in range(n)] for cams in cameras]
    sp_cfg = dict(cfg.get("surface", {}))
    edge = sp_cfg.pop("edge_threshold", None)
    sess = EditSession(scene, cameras, settings, frames, int(cfg["edit"]["frame"]),
                       int(cfg["edit"].get("view", 0)), surface_params=SurfaceFieldParams(**sp_cfg),
                       flow_provider=AnalyticFlowProvider(scene))
    if with_edit:
        img, mask = synth_edit(frames[sess.ref_view][sess.ref_frame], cfg["edit"], cfg.get("seed", 0))
        attach_edit(sess, img, mask, edge)
    return sess


def attach_edit(sess, image, mask, edge_threshold=None):
    cam = sess.reference_camera()
    sess.edit = EditSpec(image, mask, cam, float(sess.ref_frame))
    sess.surface = lift_edit(sess.edit, sess.field, sess.settings, edge_threshold)
    for key in [k for k in sess._cache if k[0] == "boxes"]:
        del sess._cache[key]
    return sess.surface


def warp_surface(sess, net, t):
    """The lifted surface moved from the reference frame to frame ``t``."""
    if net is None or t == sess.ref_frame:
        return sess.surface
    v = net.warp(sess.surface.vertices, float(sess.ref_frame), float(t))
    return sess.surface.at(v)


def render_edited(sess, net, t, view=0, mask_field=True, occlusion=True, seed=None):
    surf = warp_surface(sess, net, t)
    cam = sess.cameras[view][t]
    if not occlusion:
        return composite_render_no_occlusion(sess.field, surf.mesh, cam, t, sess.settings, seed=seed)
    return composite_render(sess.field, surf.mesh, cam, t, sess.settings, sess.surface_params,
                            seed=seed, use_mask=mask_field)

