"""Losses for the scene-flow field and the invertible motion network, and the joint training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Adam, NonFiniteError, Tensor, external, no_grad, norm, relu, tabs, tsum
from .features import bilinear, inside_image, sample_tensor, valid_bilinear
from .geometry import project_tensor
from .motion import InvertibleMotionNet, SceneFlowField, save_models
from .scenefield import interval_lengths, render_rays, sample_depths


class LossError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


FLOW_TERMS = ("slow", "smooth", "cycle", "photometric", "motion")
INV_TERMS = ("distill", "laplacian", "feature", "surface_flow", "depth")
ABLATIONS = {"lap": ("laplacian",), "fp": ("feature",), "distill": ("distill",), "inv": INV_TERMS}


@dataclass
class LossWeights:
    slow: float = 0.01
    smooth: float = 0.1
    cycle: float = 1.0
    photometric: float = 1.0
    motion: float = 0.02
    distill: float = 1.0
    laplacian: float = 0.001
    feature: float = 0.01
    surface_flow: float = 0.02
    depth: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise LossError(f"loss weight {f.name} must be a non-negative number")
            setattr(self, f.name, v)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        names = [f.name for f in fields(cls)]
        # positional aliases lambda1..lambda10 follow the field order
        for k in list(d):
            if k.startswith("lambda") and k[6:].isdigit():
                idx = int(k[6:]) - 1
                if not 0 <= idx < len(names):
                    raise LossError(f"unknown loss weight {k!r}")
                d[names[idx]] = d.pop(k)
        unknown = set(d) - set(names)
        if unknown:
            raise LossError(f"unknown loss weights {sorted(unknown)}")
        return cls(**d)

    def ablate(self, *which):
        out = LossWeights(**self.as_dict())
        for w in which:
            if w not in ABLATIONS:
                raise LossError(f"unknown ablation {w!r}; choose from {sorted(ABLATIONS)}")
            for name in ABLATIONS[w]:
                setattr(out, name, 0.0)
        return out


@dataclass
class TrainConfig:
    iterations: int = 1500
    warmup: int = 300
    lr: float = 5e-4
    lr_final_factor: float = 0.1
    motion_rays: int = 256
    photometric_rays: int = 16
    frames_per_iter: int = 4
    jitter_copies: int = 4
    jitter_radius: float = None
    distill_points: int = 512
    visibility_tol: float = None
    fp_eps: float = 0.5
    fp_mode: str = "max"
    box_margin: int = 4
    field_grad_step: float = None
    detach_teacher: bool = True
    checkpoint_every: int = 250
    cycle_points: int = 2000
    n_blocks: int = 6
    hidden: int = 64
    n_bands: int = 6
    flow_depth: int = 4
    flow_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.warmup < 0:
            raise LossError("iteration counts must be non-negative")
        if self.lr <= 0 or not 0 < self.lr_final_factor <= 1:
            raise LossError("learning rate must be positive and the decay factor in (0, 1]")
        if self.fp_mode not in ("max", "min"):
            raise LossError("fp_mode must be 'max' or 'min'")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise LossError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# helpers


def camera_rows(cameras):
    """Stack cameras into per-row (K, R, centre) arrays."""
    K = np.stack([c.K for c in cameras])
    R = np.stack([c.R for c in cameras])
    C = np.stack([c.center for c in cameras])
    return K, R, C


def project_rows(points, K, R, C):
    """Differentiable projection with one camera per row. Returns (pixels, depth)."""
    P = len(K)
    d = points - C
    pc = tsum(d.reshape(P, 3, 1) * R, axis=1)
    z = pc[:, 2]
    u = pc[:, 0] / z * K[:, 0, 0] + K[:, 0, 2]
    v = pc[:, 1] / z * K[:, 1, 1] + K[:, 1, 2]
    from .autodiff import concat
    return concat([u.reshape(-1, 1), v.reshape(-1, 1)], axis=1), z


def query_field_tensor(dynfield, x, times, step=1e-5):
    """Field query as a graph node: (P, 4) Tensor of [sigma, r, g, b]; positions get FD gradients."""
    xd = x.data
    times = np.asarray(times, dtype=np.float64)
    out = np.zeros((len(xd), 4))
    groups = [(t, np.flatnonzero(times == t)) for t in np.unique(times)]
    for t, idx in groups:
        s, c = dynfield.query(xd[idx], float(t))
        out[idx, 0] = s
        out[idx, 1:] = c

    def vjp(g):
        gx = np.zeros_like(xd)
        for t, idx in groups:
            gx[idx] = dynfield.query_vjp(xd[idx], float(t), g[idx, 0], g[idx, 1:], h=step)
        return (gx,)

    return external(out, (x,), vjp, "field_query")


def exclusive_cumsum_matrix(n):
    return np.triu(np.ones((n, n)), k=1)


def volume_render_tensor(sigma, color, delta, background):
    """Differentiable compositing of (R, N) densities and (R, N, 3) colours."""
    R, N = delta.shape
    tau = sigma * delta
    trans = (-(tau @ exclusive_cumsum_matrix(N))).exp()
    w = trans * (1.0 - (-tau).exp())
    rgb = tsum(w.reshape(R, N, 1) * color, axis=1)
    return rgb + (1.0 - tsum(w, axis=1)).reshape(R, 1) * np.asarray(background, dtype=np.float64)


def weighted_total(terms, weights):
    """Sum of lambda-weighted loss terms (a dict of scalar Tensors keyed by weight name)."""
    total = Tensor(0.0)
    for name, val in terms.items():
        total = total + val * getattr(weights, name)
    return total


def _neighbour_ok(times, direction, n_frames):
    j = np.asarray(times) + direction
    return (j >= 0) & (j <= n_frames - 1)


# ---------------------------------------------------------------------------
# scene-flow losses


def loss_flow_regularizers(flow_field, points, times, n_frames):
    """(slow, smooth, cycle) regularisers, each averaged over the sample points."""
    points = np.asarray(points, dtype=np.float64)
    P = len(points)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (P,))
    x = Tensor(points)
    fwd, bwd = flow_field.query(x, times)
    slow = (tsum(tabs(fwd)) + tsum(tabs(bwd))) / P
    s = fwd + bwd
    smooth = tsum(s * s) / P
    cycle = Tensor(0.0)
    for direction, f in ((1, fwd), (-1, bwd)):
        idx = np.flatnonzero(_neighbour_ok(times, direction, n_frames))
        if len(idx) == 0:
            continue
        fi = f[idx]
        back_f, back_b = flow_field.query(x[idx] + fi, times[idx] + direction)
        r = fi + (back_b if direction > 0 else back_f)
        cycle = cycle + tsum(r * r)
    return slow, smooth, cycle / P


def loss_motion_matching(flow_field, points, times, pixels, targets):
    """Mean over rays of the summed pixel error between induced and reference optical flow.

    ``targets`` is a list of (direction, flow (R,2), ok (R,), K, R, C) with
    per-row cameras of the destination frame.
    """
    points = np.asarray(points, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (len(points),))
    fwd, bwd = flow_field.query(Tensor(points), times)
    total = Tensor(0.0)
    any_ok = np.zeros(len(points), dtype=bool)
    for direction, gt, ok, K, Rm, C in targets:
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        any_ok[idx] = True
        f = fwd if direction > 0 else bwd
        moved = f[idx] + points[idx]
        pj, _ = project_rows(moved, K[idx], Rm[idx], C[idx])
        total = total + tsum(norm(pj - (pixels[idx] + gt[idx]), axis=1))
    n = int(any_ok.sum())
    if n == 0:
        raise LossError("no ray has a valid optical-flow target")
    return total / n


def loss_dynamic_photometric(flow_field, dynfield, points, delta, times, observed, n_frames,
                             background=(0.0, 0.0, 0.0), fd_step=1e-5):
    """Colour error of renders whose samples are advected to the neighbouring frames.

    ``points`` (R, N, 3) and ``delta`` (R, N) describe the frame-t ray samples;
    the result is the mean over rays of the squared RGB error summed over
    both neighbours.
    """
    points = np.asarray(points, dtype=np.float64)
    R, N, _ = points.shape
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (R,))
    total = Tensor(0.0)
    for direction in (1, -1):
        idx = np.flatnonzero(_neighbour_ok(times, direction, n_frames))
        if len(idx) == 0:
            continue
        r = len(idx)
        x = Tensor(points[idx].reshape(-1, 3))
        tt = np.repeat(times[idx], N)
        moved = x + flow_field.flow(x, tt, direction)
        q = query_field_tensor(dynfield, moved, tt + direction, fd_step)
        sigma = q[:, 0].reshape(r, N)
        color = q[:, 1:4].reshape(r, N, 3)
        rgb = volume_render_tensor(sigma, color, delta[idx], background)
        e = rgb - observed[idx]
        total = total + tsum(e * e)
    return total / R


# ---------------------------------------------------------------------------
# invertible-network losses


def loss_distill(net, flow_field, points, times, n_frames, detach_teacher=True):
    """Mean over samples of |net displacement - flow field displacement| to both neighbours."""
    points = np.asarray(points, dtype=np.float64)
    P = len(points)
    if P == 0:
        raise LossError("empty sample set")
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (P,))
    if detach_teacher:
        with no_grad():
            fwd, bwd = flow_field.query(points, times)
    else:
        fwd, bwd = flow_field.query(Tensor(points), times)
    x = Tensor(points)
    xc = net._fwd(x, times)
    total = Tensor(0.0)
    for direction, f in ((1, fwd), (-1, bwd)):
        idx = np.flatnonzero(_neighbour_ok(times, direction, n_frames))
        if len(idx) == 0:
            continue
        moved = net._inv(xc[idx], times[idx] + direction)
        total = total + tsum(norm(moved - points[idx] - f[idx], axis=1))
    return total / P


def umbrella_operator(neighbors):
    """Dense (V, V) matrix mapping vertices to v_i - mean(neighbours of v_i)."""
    V = len(neighbors)
    op = np.eye(V)
    for i, nb in enumerate(neighbors):
        if len(nb) == 0:
            raise LossError(f"vertex {i} has no neighbours")
        op[i, nb] -= 1.0 / len(nb)
    return op


def laplacian_residual(vertices, op):
    return op @ vertices


def loss_laplacian(vertices, op):
    """Mean squared umbrella-Laplacian residual over vertices."""
    r = laplacian_residual(vertices, op)
    return tsum(r * r) / len(op)


def _floor_or_cap(d, eps, mode):
    if mode == "max":
        return relu(d - eps) + eps
    return d - relu(d - eps)


def reference_descriptors(surface_vertices, camera, fmap):
    """Descriptors of the reference image at the projected reference vertices."""
    from .geometry import project

    pix, _ = project(camera, surface_vertices)
    ok = inside_image(pix, camera.width, camera.height)
    desc = np.zeros((len(pix), fmap.shape[-1]))
    desc[ok] = bilinear(fmap, pix[ok])[0]
    return desc, ok


def feature_terms(vertices, ref_desc, ref_ok, camera, fmap, eps=0.5, mode="max"):
    """(sum Tensor, count) of per-vertex feature-alignment terms for one view."""
    pix, z = project_tensor(camera, vertices)
    ok = ref_ok & inside_image(pix.data, camera.width, camera.height) & (z.data > 0)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return Tensor(0.0), 0
    f = sample_tensor(fmap, pix[idx])
    r = ref_desc[idx]
    cos = tsum(f * r, axis=1) / (norm(f, axis=1) * np.linalg.norm(r, axis=1))
    return tsum(_floor_or_cap(1.0 - cos, eps, mode)), len(idx)


def loss_feature_photometric(vertices, ref_desc, ref_ok, views, eps=0.5, mode="max"):
    """Mean over (vertex, view) pairs of max(1 - cos, eps) (or min with ``mode='min'``).

    ``views`` is a list of (camera, feature map) pairs observing the frame.
    """
    total, count = Tensor(0.0), 0
    for camera, fmap in views:
        s, n = feature_terms(vertices, ref_desc, ref_ok, camera, fmap, eps, mode)
        total, count = total + s, count + n
    if count == 0:
        raise LossError("all vertices project outside every view")
    return total / count


def surface_flow_terms(v_t, v_j, cam_t, cam_j, flow_map, flow_valid, visible):
    """(sum Tensor, ok mask) of |reference flow - projected vertex motion| for one direction."""
    pt, _ = project_tensor(cam_t, v_t)
    pj, _ = project_tensor(cam_j, v_j)
    ok = np.asarray(visible, bool) & inside_image(pt.data, cam_t.width, cam_t.height)
    ok[ok] &= valid_bilinear(flow_valid, pt.data[ok])
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return Tensor(0.0), ok
    gt = sample_tensor(flow_map, pt[idx])
    return tsum(norm((pj - pt)[idx] - gt, axis=1)), ok


def loss_surface_flow(v_t, neighbours, cam_t, visible):
    """Mean over visible vertices of the flow error summed over neighbouring frames.

    ``neighbours`` is a list of (v_j Tensor, cam_j, flow map (H,W,2), flow validity (H,W)).
    """
    total = Tensor(0.0)
    counted = np.zeros(len(v_t), dtype=bool)
    for v_j, cam_j, fmap, fvalid in neighbours:
        s, ok = surface_flow_terms(v_t, v_j, cam_t, cam_j, fmap, fvalid, visible)
        total = total + s
        counted |= ok
    n = int(counted.sum())
    return total / n if n else total


def depth_terms(vertices, camera, depth_map, depth_valid, visible):
    pix, z = project_tensor(camera, vertices)
    ok = np.asarray(visible, bool) & inside_image(pix.data, camera.width, camera.height)
    ok[ok] &= valid_bilinear(depth_valid, pix.data[ok])
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return Tensor(0.0), 0
    d = sample_tensor(depth_map, pix[idx])[:, 0]
    return tsum(tabs(z[idx] - d)), len(idx)


def loss_depth_consistency(vertices, camera, depth_map, depth_valid, visible):
    """Mean |vertex depth - rendered field depth| over visible vertices with valid depth."""
    s, n = depth_terms(vertices, camera, depth_map, depth_valid, visible)
    return s / n if n else s


def visibility(vertices, camera, tol=0.003, depth_map=None, depth_valid=None, field=None, t=None,
               settings=None):
    """Vertices in front of (or within ``tol`` behind) the field's rendered depth, inside the image.

    Uses the given depth map (nearest pixel) or renders the field exactly at
    the projected positions when no map is supplied.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    pc = (v - camera.center) @ camera.R
    z = pc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    pix = np.stack([camera.K[0, 0] * pc[:, 0] / zs + camera.K[0, 2],
                    camera.K[1, 1] * pc[:, 1] / zs + camera.K[1, 2]], axis=1)
    vis = front & inside_image(pix, camera.width, camera.height)
    idx = np.flatnonzero(vis)
    if len(idx) == 0:
        return vis
    if depth_map is not None:
        jj = np.floor(pix[idx, 0]).astype(np.int64)
        ii = np.floor(pix[idx, 1]).astype(np.int64)
        d, dv = depth_map[ii, jj], depth_valid[ii, jj]
    else:
        _, d, dv, _ = render_rays(field, camera, t, settings, pixels=pix[idx])
    vis[idx] = ~dv | (z[idx] <= d + tol)
    return vis


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: InvertibleMotionNet
    field: SceneFlowField
    history: list = field(default_factory=list)
    cycle_errors: list = field(default_factory=list)
    seconds: float = 0.0


def cycle_error(net, centre, radius, n_frames, n, rng):
    """Max-norm round-trip error of warp t -> t' -> t over random points and frame pairs."""
    x = centre + rng.uniform(-radius, radius, (n, 3))
    t = rng.uniform(0, n_frames - 1, n)
    t2 = rng.uniform(0, n_frames - 1, n)
    back = net.warp(net.warp(x, t, t2), t2, t)
    return float(np.max(np.abs(back - x)))


def _ball(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.random((n, 1)) ** (1.0 / 3.0)


def write_loss_csv(path, history):
    if not history:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


class _Data:
    """Arrays precomputed once per training run."""

    def __init__(self, sess, cfg, weights):
        V, T = sess.n_views, sess.n_frames
        self.boxes = sess.track_boxes(cfg.box_margin)
        self.cams = np.empty((V, T), dtype=object)
        self.K = np.zeros((V, T, 3, 3))
        self.R = np.zeros((V, T, 3, 3))
        self.C = np.zeros((V, T, 3))
        for v in range(V):
            for t in range(T):
                cam = sess.cameras[v][t]
                self.cams[v, t] = cam
                self.K[v, t], self.R[v, t], self.C[v, t] = cam.K, cam.R, cam.center
        H, W = sess.height, sess.width
        self.depth = np.zeros((V, T, H, W))
        self.depth_ok = np.zeros((V, T, H, W), dtype=bool)
        self.points = np.zeros((V, T, H, W, 3))
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pix = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
        for v in range(V):
            for t in range(T):
                d, ok = sess.depth(v, t)
                self.depth[v, t], self.depth_ok[v, t] = d, ok
                cam = self.cams[v, t]
                dc = np.stack([(pix[:, 0] - cam.K[0, 2]) / cam.K[0, 0],
                               (pix[:, 1] - cam.K[1, 2]) / cam.K[1, 1], np.ones(len(pix))], axis=1)
                self.points[v, t] = (dc * d.reshape(-1, 1) @ cam.R.T + cam.center).reshape(H, W, 3)
        self.flow = {}
        for v in range(V):
            for t in range(T):
                for direction in (1, -1):
                    self.flow[v, t, direction] = sess.flow(v, t, direction)
        self.frames = np.stack([np.stack(f) for f in sess.frames])
        self.features = None
        if weights.feature > 0:
            self.features = [[sess.features(v, t) for t in range(T)] for v in range(V)]
            ref_cam = sess.reference_camera()
            self.ref_desc, self.ref_ok = reference_descriptors(
                sess.surface.vertices, ref_cam, sess.features(sess.ref_view, sess.ref_frame))


def train(sess, cfg=None, weights=None, out_dir=None, log=None):
    """Fit the scene-flow field and the invertible network to a session.

    The first ``cfg.warmup`` iterations train the flow field alone; after
    that all terms are optimised jointly. Returns a :class:`TrainResult`.
    """
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    if sess.surface is None:
        raise LossError("session has no lifted edit")
    t_start = time.time()
    rng = np.random.default_rng(cfg.seed)
    T, V = sess.n_frames, sess.n_views
    beta = sess.surface_params.beta
    jitter_r = cfg.jitter_radius if cfg.jitter_radius is not None else 4 * beta
    vis_tol = cfg.visibility_tol if cfg.visibility_tol is not None else 3 * beta
    st = sess.settings
    fd_step = cfg.field_grad_step or (st.far - st.near) / st.n_samples / 2

    net = InvertibleMotionNet(T, cfg.n_blocks, cfg.hidden, cfg.n_bands, seed=cfg.seed)
    flow = SceneFlowField(T, cfg.flow_depth, cfg.flow_width, cfg.n_bands, seed=cfg.seed)
    opt = Adam(list(net.params.values()) + list(flow.params.values()), lr=cfg.lr)
    data = _Data(sess, cfg, weights)
    v_ref = sess.surface.vertices
    lap_op = umbrella_operator(sess.surface.mesh.neighbors()) if weights.laplacian > 0 else None
    tr = float(sess.ref_frame)
    centre = v_ref.mean(axis=0)
    radius = float(np.max(np.abs(v_ref - centre))) + 0.1
    result = TrainResult(net, flow)

    for it in range(cfg.iterations):
        joint = it >= cfg.warmup
        # exponential decay from lr to lr * lr_final_factor over the run
        opt.state.lr = cfg.lr * cfg.lr_final_factor ** (it / max(cfg.iterations - 1, 1))
        terms = {}
        try:
            _flow_terms(terms, flow, sess, data, cfg, weights, rng, fd_step)
            if joint:
                _inv_terms(terms, net, flow, sess, data, cfg, weights, rng, v_ref, tr, lap_op,
                           jitter_r, vis_tol)
            total = weighted_total(terms, weights)
            opt.zero_grad()
            if total.requires_grad:
                total.backward()
                opt.step()
        except NonFiniteError as exc:
            last = result.history[-1] if result.history else {}
            raise TrainingDiverged(f"non-finite value at iteration {it} ({exc}); last losses {last}") from exc
        row = {"iteration": it}
        for name in FLOW_TERMS + INV_TERMS:
            row[name] = float(terms[name].data) if name in terms else 0.0
        row["total"] = float(total.data)
        result.history.append(row)
        if log and (it % 100 == 0 or it == cfg.iterations - 1):
            log(f"iter {it} total {row['total']:.5f} " +
                " ".join(f"{k}={row[k]:.4g}" for k in FLOW_TERMS + INV_TERMS if k in terms))
        last = it == cfg.iterations - 1
        if cfg.checkpoint_every and ((it + 1) % cfg.checkpoint_every == 0 or last):
            err = cycle_error(net, centre, radius, T, cfg.cycle_points, np.random.default_rng(it))
            result.cycle_errors.append((it + 1, err))
            if out_dir is not None:
                save_models(Path(out_dir) / f"ckpt_{it + 1:06d}", net, flow, {"iteration": it + 1})
    result.seconds = time.time() - t_start
    if out_dir is not None:
        save_models(Path(out_dir) / "final", net, flow, {"iteration": cfg.iterations})
        write_loss_csv(Path(out_dir) / "losses.csv", result.history)
    return result


def _sample_rays(sess, data, n, rng):
    V, T = sess.n_views, sess.n_frames
    v = rng.integers(V, size=n)
    t = rng.integers(T, size=n)
    b = data.boxes[v, t]
    x = b[:, 0] + np.floor(rng.random(n) * (b[:, 2] - b[:, 0])).astype(np.int64)
    y = b[:, 1] + np.floor(rng.random(n) * (b[:, 3] - b[:, 1])).astype(np.int64)
    ok = data.depth_ok[v, t, y, x]
    return v[ok], t[ok], y[ok], x[ok]


def _flow_terms(terms, flow, sess, data, cfg, weights, rng, fd_step):
    T = sess.n_frames
    need_rays = any(getattr(weights, k) > 0 for k in ("slow", "smooth", "cycle", "motion"))
    if need_rays:
        v, t, y, x = _sample_rays(sess, data, cfg.motion_rays, rng)
        if len(v):
            pts = data.points[v, t, y, x]
            pix = np.stack([x + 0.5, y + 0.5], axis=1)
            tf = t.astype(np.float64)
            if weights.motion > 0:
                targets = []
                for direction in (1, -1):
                    j = np.clip(t + direction, 0, T - 1)
                    gt = np.zeros((len(v), 2))
                    ok = np.zeros(len(v), dtype=bool)
                    for k in range(len(v)):
                        fl, fv = data.flow[v[k], t[k], direction]
                        gt[k], ok[k] = fl[y[k], x[k]], fv[y[k], x[k]]
                    targets.append((direction, gt, ok, data.K[v, j], data.R[v, j], data.C[v, j]))
                try:
                    terms["motion"] = loss_motion_matching(flow, pts, tf, pix, targets)
                except LossError:
                    pass
            if any(getattr(weights, k) > 0 for k in ("slow", "smooth", "cycle")):
                slow, smooth, cycle = loss_flow_regularizers(flow, pts, tf, T)
                for name, val in (("slow", slow), ("smooth", smooth), ("cycle", cycle)):
                    if getattr(weights, name) > 0:
                        terms[name] = val
    if weights.photometric > 0 and cfg.photometric_rays > 0:
        v, t, y, x = _sample_rays(sess, data, cfg.photometric_rays, rng)
        if len(v):
            st = sess.settings
            K, Rm, C = data.K[v, t], data.R[v, t], data.C[v, t]
            dc = np.stack([(x + 0.5 - K[:, 0, 2]) / K[:, 0, 0], (y + 0.5 - K[:, 1, 2]) / K[:, 1, 1],
                           np.ones(len(v))], axis=1)
            dw = np.einsum("pij,pj->pi", Rm, dc)
            cos = 1.0 / np.linalg.norm(dc, axis=1)
            z = sample_depths(len(v), st, seed=int(rng.integers(2 ** 31)))
            pts = C[:, None, :] + dw[:, None, :] * z[..., None]
            delta = interval_lengths(z, st.near, st.far) / cos[:, None]
            terms["photometric"] = loss_dynamic_photometric(
                flow, sess.field, pts, delta, t.astype(np.float64), data.frames[v, t, y, x], T,
                st.background, fd_step)


def _inv_terms(terms, net, flow, sess, data, cfg, weights, rng, v_ref, tr, lap_op, jitter_r, vis_tol):
    T, V = sess.n_frames, sess.n_views
    if not any(getattr(weights, k) > 0 for k in INV_TERMS):
        return
    nv = len(v_ref)
    frames = np.sort(rng.choice(T, size=min(cfg.frames_per_iter, T), replace=False))
    need_traj = any(getattr(weights, k) > 0 for k in ("laplacian", "feature", "surface_flow", "depth"))
    traj = {}
    if need_traj:
        wanted = set(frames.tolist())
        if weights.surface_flow > 0:
            wanted |= {f + d for f in frames for d in (-1, 1) if 0 <= f + d < T}
        wanted = sorted(wanted)
        xc = net._fwd(Tensor(v_ref), tr)
        tiled = xc[np.tile(np.arange(nv), len(wanted))]
        allv = net._inv(tiled, np.repeat(np.asarray(wanted, dtype=np.float64), nv))
        for k, f in enumerate(wanted):
            traj[f] = allv[k * nv:(k + 1) * nv]

    if weights.distill > 0:
        pts, times = [], []
        for f in frames:
            base = traj[f].data if f in traj else net.warp(v_ref, tr, float(f))
            reps = np.repeat(base, cfg.jitter_copies + 1, axis=0)
            reps[np.arange(len(reps)) % (cfg.jitter_copies + 1) != 0] += _ball(
                rng, nv * cfg.jitter_copies, jitter_r)
            pts.append(reps)
            times.append(np.full(len(reps), float(f)))
        pts, times = np.concatenate(pts), np.concatenate(times)
        if cfg.distill_points and len(pts) > cfg.distill_points:
            pick = rng.choice(len(pts), size=cfg.distill_points, replace=False)
            pts, times = pts[pick], times[pick]
        terms["distill"] = loss_distill(net, flow, pts, times, T, cfg.detach_teacher)

    if not need_traj:
        return
    lap = feat = sflow = dep = Tensor(0.0)
    n_feat = n_dep = n_sf = 0
    for f in frames:
        vt = traj[f]
        if weights.laplacian > 0:
            lap = lap + loss_laplacian(vt, lap_op)
        for v in range(V):
            cam = data.cams[v, f]
            vis = visibility(vt.data, cam, vis_tol, data.depth[v, f], data.depth_ok[v, f])
            if weights.feature > 0:
                s, n = feature_terms(vt, data.ref_desc, data.ref_ok, cam, data.features[v][f],
                                     cfg.fp_eps, cfg.fp_mode)
                feat, n_feat = feat + s, n_feat + n
            if weights.surface_flow > 0:
                counted = np.zeros(nv, dtype=bool)
                for direction in (1, -1):
                    j = f + direction
                    if not 0 <= j < T:
                        continue
                    fmap, fvalid = data.flow[v, f, direction]
                    s, ok = surface_flow_terms(vt, traj[j], cam, data.cams[v, j], fmap, fvalid, vis)
                    sflow = sflow + s
                    counted |= ok
                n_sf += int(counted.sum())
            if weights.depth > 0:
                s, n = depth_terms(vt, cam, data.depth[v, f], data.depth_ok[v, f], vis)
                dep, n_dep = dep + s, n_dep + n
    if weights.laplacian > 0:
        terms["laplacian"] = lap / len(frames)
    if weights.feature > 0 and n_feat:
        terms["feature"] = feat / n_feat
    if weights.surface_flow > 0 and n_sf:
        terms["surface_flow"] = sflow / n_sf
    if weights.depth > 0 and n_dep:
        terms["depth"] = dep / n_dep
