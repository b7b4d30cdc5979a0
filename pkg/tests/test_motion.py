import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import EmptyField
from dynedit.autodiff import Tensor, tsum
from dynedit.motion import (InvertibleMotionNet, SceneFlowField, flow_query, from_canonical,
                            induced_optical_flow, load_models, save_models, time_encoding,
                            to_canonical, warp)
from dynedit.scenefield import make_camera, make_scene


def scramble(params, rng, scale=0.3):
    for p in params.values():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def test_time_encoding_at_zero():
    enc = time_encoding(0.0, 30)
    assert enc.shape == (1, 12)
    np.testing.assert_array_equal(enc[0, :2], [0.0, 1.0])
    np.testing.assert_allclose(time_encoding(29.0, 30)[0, 1::2], np.cos(np.pi * 2.0 ** np.arange(6)))


def test_zero_initialised_net_is_identity():
    net = InvertibleMotionNet(10)
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert np.array_equal(to_canonical(net, x, 3.0), x)
    assert np.array_equal(from_canonical(net, x, 7.0), x)


def test_hand_set_translation_block():
    net = InvertibleMotionNet(10, n_blocks=3)
    # block 1 passes axis 1 through and shifts axes (0, 2); last bias = [s0, s2, b0, b2]
    net.blocks[1].net.params["inv.1.2.b"].data[:] = [0.0, 0.0, 0.1, 0.0]
    x = np.array([[0.3, -0.2, 1.0], [2.0, 0.0, -1.0]])
    np.testing.assert_allclose(to_canonical(net, x, 4.0), x + [0.1, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(from_canonical(net, x + [0.1, 0, 0], 4.0), x, atol=1e-15)


def test_blocks_cycle_axes():
    net = InvertibleMotionNet(10)
    assert [b.axis for b in net.blocks] == [0, 1, 2, 0, 1, 2]
    assert net.blocks[0].net.params["inv.0.0.w"].shape == (13, 64)
    assert net.blocks[0].net.params["inv.0.2.w"].shape == (64, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_inverse_of_forward_with_arbitrary_parameters(seed):
    rng = np.random.default_rng(seed)
    net = InvertibleMotionNet(30, seed=seed % 1000)
    scramble(net.params, rng)
    x = rng.uniform(-2, 2, size=(200, 3))
    t = rng.integers(0, 30, size=200).astype(float)
    y = net.to_canonical(x, t)
    assert np.max(np.abs(net.from_canonical(y, t) - x)) < 1e-5
    t2 = rng.integers(0, 30, size=200).astype(float)
    back = net.warp(net.warp(x, t, t2), t2, t)
    assert np.max(np.abs(back - x)) < 2e-5
    assert np.max(np.abs(net.warp(x, t, t) - x)) < 1e-5


def test_warp_is_differentiable():
    rng = np.random.default_rng(1)
    net = InvertibleMotionNet(8, n_blocks=3, hidden=8)
    scramble(net.params, rng, 0.2)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = net.warp(x, 1.0, 5.0)
    assert isinstance(y, Tensor)
    tsum(y * y).backward()
    assert x.grad.shape == (4, 3) and np.all(np.isfinite(x.grad))


def test_zero_flow_field():
    f = SceneFlowField(10)
    fwd, bwd = flow_query(f, np.ones((5, 3)), 2.0)
    assert np.all(fwd == 0) and np.all(bwd == 0)
    assert f.net.params["flow.0.w"].shape == (15, 128)


def _constant_flow(v, n_frames=30):
    f = SceneFlowField(n_frames)
    f.net.params["flow.4.b"].data[:] = [*v, *(-np.asarray(v))]
    return f


def test_induced_flow_of_uniform_translation():
    scene = make_scene({"kind": "textured-plane-translation"})
    cam = make_camera({})
    pix = np.array([[32.0, 32.0], [10.5, 40.5]])
    zero, valid = induced_optical_flow(SceneFlowField(30), scene, cam, cam, pix, 3.0, 1)
    assert valid.all() and np.all(zero == 0)
    flow, valid = induced_optical_flow(_constant_flow([0.02, 0, 0]), scene, cam, cam, pix, 3.0, 1)
    # 80 px focal at depth 2.5; the rendered depth sits half a stratum deeper
    np.testing.assert_allclose(flow, np.tile([0.64, 0.0], (2, 1)), atol=5e-3)
    _, valid = induced_optical_flow(_constant_flow([0.02, 0, 0]), EmptyField(), cam, cam, pix, 3.0, 1)
    assert not valid.any()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    net = InvertibleMotionNet(12, n_blocks=4, hidden=16, seed=1)
    field = SceneFlowField(12, depth=2, width=32, seed=1)
    scramble(net.params, rng)
    scramble(field.params, rng)
    save_models(tmp_path / "ck", net, field, {"iteration": 7})
    net2, field2, meta = load_models(tmp_path / "ck")
    assert meta["iteration"] == 7
    for k, p in net.params.items():
        np.testing.assert_array_equal(net2.params[k].data, p.data.astype(np.float32))
    x = rng.normal(size=(10, 3))
    assert np.max(np.abs(net2.warp(net2.warp(x, 0.0, 9.0), 9.0, 0.0) - x)) < 2e-5
    np.testing.assert_allclose(field2.query(x, 3.0)[0], field.query(x, 3.0)[0], atol=1e-4)


def test_bad_inputs():
    with pytest.raises(ValueError):
        InvertibleMotionNet(1)
    net = InvertibleMotionNet(5)
    with pytest.raises(ValueError):
        net.to_canonical(np.zeros((3, 3)), np.zeros(2))
