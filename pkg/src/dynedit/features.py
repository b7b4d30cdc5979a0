"""Dense local descriptors and differentiable bilinear sampling of per-pixel maps."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, external


def to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


class PatchDescriptor:
    """Contrast-normalised grey patch plus the two image gradients at every pixel.

    With the default radius 2 this gives 25 + 2 = 27 channels. A small
    constant is added to every channel so that no descriptor has zero norm.
    """

    def __init__(self, radius=2, gradient_weight=1.0, floor=1e-3):
        self.radius = radius
        self.gradient_weight = gradient_weight
        self.floor = floor

    @property
    def dim(self):
        return (2 * self.radius + 1) ** 2 + 2

    def extract(self, image):
        g = to_gray(image)
        r = self.radius
        padded = np.pad(g, r, mode="reflect")
        win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1)).reshape(g.shape + (-1,))
        win = win - win.mean(axis=-1, keepdims=True)
        win = win / (np.linalg.norm(win, axis=-1, keepdims=True) + 1e-2)
        gy, gx = np.gradient(g)
        grad = self.gradient_weight * np.stack([gx, gy], axis=-1)
        return np.concatenate([win, grad], axis=-1) + self.floor


def _corners(shape, uv):
    H, W = shape[:2]
    x = np.clip(uv[:, 0] - 0.5, 0.0, W - 1.0)
    y = np.clip(uv[:, 1] - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    # derivative is zero where the coordinate was clamped
    dx_ok = ((uv[:, 0] - 0.5 > 0) & (uv[:, 0] - 0.5 < W - 1)).astype(np.float64)
    dy_ok = ((uv[:, 1] - 0.5 > 0) & (uv[:, 1] - 0.5 < H - 1)).astype(np.float64)
    return x - x0, y - y0, x0, x1, y0, y1, dx_ok, dy_ok


def bilinear(fmap, uv):
    """Sample an (H, W[, C]) map at continuous pixel coordinates; returns (values, d/du, d/dv)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    squeeze = fmap.ndim == 2
    if squeeze:
        fmap = fmap[..., None]
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    fx, fy, x0, x1, y0, y1, dx_ok, dy_ok = _corners(fmap.shape, uv)
    a, b = fmap[y0, x0], fmap[y0, x1]
    c, d = fmap[y1, x0], fmap[y1, x1]
    fx_, fy_ = fx[:, None], fy[:, None]
    top = a + (b - a) * fx_
    bot = c + (d - c) * fx_
    val = top + (bot - top) * fy_
    du = ((b - a) * (1 - fy_) + (d - c) * fy_) * dx_ok[:, None]
    dv = (bot - top) * dy_ok[:, None]
    if squeeze:
        return val[:, 0], du[:, 0], dv[:, 0]
    return val, du, dv


def sample_tensor(fmap, uv):
    """Differentiable bilinear sampling: ``uv`` is a (P, 2) Tensor, result (P, C) Tensor."""
    val, du, dv = bilinear(fmap, uv.data)
    if val.ndim == 1:
        val, du, dv = val[:, None], du[:, None], dv[:, None]

    def vjp(g):
        return (np.stack([(g * du).sum(axis=1), (g * dv).sum(axis=1)], axis=1),)

    return external(val, (uv,), vjp, "bilinear")


def inside_image(uv, width, height):
    uv = np.atleast_2d(uv)
    return (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)


def valid_bilinear(valid_map, uv):
    """True where all four bilinear taps of a boolean map are set."""
    _, _, x0, x1, y0, y1, _, _ = _corners(valid_map.shape, np.atleast_2d(uv))
    return valid_map[y0, x0] & valid_map[y0, x1] & valid_map[y1, x0] & valid_map[y1, x1]
