"""Motion models: a time-conditioned invertible coupling network and a scene-flow MLP."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, exp, index, no_grad, relu, tanh
from .geometry import project_tensor, unproject
from .io import load_checkpoint, save_checkpoint


def time_encoding(t, n_frames, n_bands=6):
    """(P, 2*n_bands) sin/cos encoding of frame time normalised to [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    tn = t / max(n_frames - 1, 1)
    freq = (2.0 ** np.arange(n_bands)) * np.pi
    ang = tn[:, None] * freq[None, :]
    out = np.empty((len(t), 2 * n_bands))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class MLP:
    """ReLU network with a linear (optionally zero-initialised) output layer."""

    def __init__(self, sizes, rng, zero_last=True, name="mlp"):
        self.params = {}
        self.n_layers = len(sizes) - 1
        for k in range(self.n_layers):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            if zero_last and k == self.n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"{name}.{k}.w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.{k}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
        self.name = name

    def __call__(self, x):
        h = x
        for k in range(self.n_layers):
            h = h @ self.params[f"{self.name}.{k}.w"] + self.params[f"{self.name}.{k}.b"]
            if k < self.n_layers - 1:
                h = relu(h)
        return h


def _rows(x, t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(len(x), float(t))
    if t.shape != (len(x),):
        raise ValueError("time must be a scalar or one value per point")
    return t


class CouplingBlock:
    """Affine coupling: coordinate ``axis`` passes through and conditions the other two."""

    def __init__(self, axis, n_bands, hidden, rng, name, scale_bound=1.0):
        self.axis = axis
        self.scale_bound = scale_bound
        self.others = [a for a in range(3) if a != axis]
        self.net = MLP([1 + 2 * n_bands, hidden, hidden, 4], rng, zero_last=True, name=name)

    def _st(self, xc, enc):
        out = self.net(concat([xc, Tensor(enc)], axis=1))
        # log-scale bounded so arbitrary parameters cannot overflow the inverse
        return tanh(out[:, 0:2]) * self.scale_bound, out[:, 2:4]

    def _assemble(self, xc, xo):
        cols = [None, None, None]
        cols[self.axis] = xc
        cols[self.others[0]] = xo[:, 0:1]
        cols[self.others[1]] = xo[:, 1:2]
        return concat(cols, axis=1)

    def forward(self, x, enc):
        xc = x[:, self.axis:self.axis + 1]
        xo = index(x, (slice(None), self.others))
        s, b = self._st(xc, enc)
        return self._assemble(xc, xo * exp(s) + b)

    def inverse(self, y, enc):
        yc = y[:, self.axis:self.axis + 1]
        yo = index(y, (slice(None), self.others))
        s, b = self._st(yc, enc)
        return self._assemble(yc, (yo - b) * exp(-s))


def _wrap(fn, x, *args):
    if isinstance(x, Tensor):
        return fn(x, *args)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    with no_grad():
        out = fn(Tensor(np.atleast_2d(x)), *args).data
    return out[0] if single else out


class InvertibleMotionNet:
    """Per-frame bijections H_t into a shared canonical space; exact inverse by construction."""

    def __init__(self, n_frames, n_blocks=6, hidden=64, n_bands=6, seed=0):
        if n_frames < 2:
            raise ValueError("need at least two frames")
        self.n_frames = n_frames
        self.n_bands = n_bands
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.blocks = [CouplingBlock(k % 3, n_bands, hidden, rng, f"inv.{k}") for k in range(n_blocks)]

    @property
    def params(self):
        out = {}
        for b in self.blocks:
            out.update(b.net.params)
        return out

    def encode(self, t, n):
        return time_encoding(_rows(np.zeros(n), t), self.n_frames, self.n_bands)

    def _fwd(self, x, t):
        enc = self.encode(t, len(x))
        for b in self.blocks:
            x = b.forward(x, enc)
        return x

    def _inv(self, y, t):
        enc = self.encode(t, len(y))
        for b in reversed(self.blocks):
            y = b.inverse(y, enc)
        return y

    def to_canonical(self, x, t):
        return _wrap(self._fwd, x, t)

    def from_canonical(self, xc, t):
        return _wrap(self._inv, xc, t)

    def warp(self, x, t, t2):
        """Move observation-space points from frame ``t`` to frame ``t2``."""
        return _wrap(lambda v: self._inv(self._fwd(v, t), t2), x)


class SceneFlowField:
    """MLP from (x, time encoding) to forward and backward one-frame 3D displacements."""

    def __init__(self, n_frames, depth=4, width=128, n_bands=6, seed=0):
        self.n_frames = n_frames
        self.n_bands = n_bands
        rng = np.random.default_rng(seed + 7919)
        self.net = MLP([3 + 2 * n_bands] + [width] * depth + [6], rng, zero_last=True, name="flow")

    @property
    def params(self):
        return self.net.params

    def _query(self, x, t):
        enc = time_encoding(_rows(x.data, t), self.n_frames, self.n_bands)
        return self.net(concat([x, Tensor(enc)], axis=1))

    def query(self, x, t):
        """(forward, backward) flow; Tensors in, Tensors out."""
        out = _wrap(self._query, x, t)
        return out[..., 0:3], out[..., 3:6]

    def flow(self, x, t, direction):
        fwd, bwd = self.query(x, t)
        return fwd if direction > 0 else bwd


def to_canonical(net, x, t):
    return net.to_canonical(x, t)


def from_canonical(net, xc, t):
    return net.from_canonical(xc, t)


def warp(net, x, t, t2):
    return net.warp(x, t, t2)


def flow_query(field, x, t):
    return field.query(x, t)


def induced_flow_from_points(field, points, t, direction, camera_j, pixels):
    """Optical flow of expected ray points advected by the flow field (Tensor result)."""
    pts = Tensor(points)
    moved = pts + field.flow(pts, t, direction)
    pj, _ = project_tensor(camera_j, moved)
    return pj - np.asarray(pixels, dtype=np.float64)


def expected_points(dynfield, camera, t, pixels, settings):
    """Expected ray points under the volume-rendering weights, plus validity."""
    from .scenefield import render_rays

    _, depth, valid, _ = render_rays(dynfield, camera, t, settings, pixels=pixels)
    pts = np.zeros((len(depth), 3))
    if np.any(valid):
        pts[valid] = unproject(camera, np.atleast_2d(pixels)[valid], depth[valid])
    return pts, valid


def induced_optical_flow(field, dynfield, camera_i, camera_j, pixels, t, direction, settings=None):
    """(R, 2) flow from frame ``t`` to ``t + direction`` and a validity mask."""
    from .scenefield import RenderSettings

    settings = settings or RenderSettings()
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    pts, valid = expected_points(dynfield, camera_i, t, pixels, settings)
    out = np.zeros((len(pixels), 2))
    if np.any(valid):
        with no_grad():
            out[valid] = induced_flow_from_points(field, pts[valid], t, direction, camera_j,
                                                  pixels[valid]).data
    return out, valid


# ---------------------------------------------------------------------------
# checkpoints


def save_models(path, net, field, meta=None):
    tensors = {**net.params, **field.params}
    m = {"n_frames": net.n_frames, "n_blocks": len(net.blocks), "hidden": net.hidden,
         "n_bands": net.n_bands, "flow_depth": field.net.n_layers - 1,
         "flow_width": field.net.params["flow.0.w"].shape[1]}
    m.update(meta or {})
    save_checkpoint(path, {k: v.data for k, v in tensors.items()}, m)


def load_models(path):
    arrays, meta = load_checkpoint(path)
    net = InvertibleMotionNet(meta["n_frames"], meta["n_blocks"], meta["hidden"], meta["n_bands"])
    field = SceneFlowField(meta["n_frames"], meta["flow_depth"], meta["flow_width"], meta["n_bands"])
    for params in (net.params, field.params):
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"tensor {name!r} has shape {arrays[name].shape}, expected {p.shape}")
            p.data[...] = arrays[name]
    return net, field, meta
