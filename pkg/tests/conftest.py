import numpy as np
import pytest

from dynedit.scenefield import DynamicField, RenderSettings, make_camera


class SlabField(DynamicField):
    """Slabs of constant density and colour, given as depth ranges from the default camera."""

    def __init__(self, slabs, eye_z=-2.5):
        # list of (depth0, depth1, sigma, rgb)
        self.slabs = [(z0 + eye_z, z1 + eye_z, s, c) for z0, z1, s, c in slabs]

    def query(self, x, t, d=None):
        x = np.atleast_2d(x)
        sigma = np.zeros(len(x))
        color = np.zeros((len(x), 3))
        for z0, z1, s, c in self.slabs:
            m = (x[:, 2] >= z0) & (x[:, 2] < z1) & (sigma == 0)
            sigma[m] = s
            color[m] = c
        return sigma, color


class EmptyField(DynamicField):
    def query(self, x, t, d=None):
        x = np.atleast_2d(x)
        return np.zeros(len(x)), np.zeros((len(x), 3))


class SmoothField(DynamicField):
    """Smooth density and colour, handy for finite-difference checks."""

    def query(self, x, t, d=None):
        x = np.atleast_2d(x)
        s = 3.0 * np.exp(-np.sum((x - [0.1 * t, 0, 0]) ** 2, axis=1))
        c = 0.5 + 0.4 * np.stack([np.sin(2 * x[:, 0] + t), np.cos(3 * x[:, 1]), np.sin(x[:, 2])], axis=1)
        return s, c


@pytest.fixture
def camera():
    return make_camera({})


@pytest.fixture
def render_settings():
    return RenderSettings()
