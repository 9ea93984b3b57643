import numpy as np
import pytest

from dosepred import net3d
from dosepred.gradcheck import (check_activations, check_batchnorm, check_conv_direct,
                                check_conv_down, check_network, check_upconv,
                                check_upsample_adjoint, central_diff, rel_error)
from dosepred.net3d import NetConfig, UNet3D


def test_conv_down_averaging_kernel():
    w = np.full((1, 1, 4, 4, 4), 1 / 64)
    # every output of a 4^3 input touches the zero padding: 3 of 4 taps valid per axis
    y = net3d.conv_down_forward(np.ones((1, 4, 4, 4)), w)
    assert y.shape == (1, 2, 2, 2)
    assert np.allclose(y, 27 / 64)
    y = net3d.conv_down_forward(np.ones((1, 8, 8, 8)), w)
    assert np.allclose(y[0, 1:3, 1:3, 1:3], 1.0)


def test_conv_down_zero_weights_and_odd_dims(rng):
    x = rng.normal(size=(2, 4, 4, 4))
    w = np.zeros((3, 2, 4, 4, 4))
    assert not np.any(net3d.conv_down_forward(x, w))
    dy = rng.normal(size=(3, 2, 2, 2))
    _, dw, _ = net3d.conv_down_backward(dy, x, w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(w)
    for o in range(3):
        for i, j, k in np.ndindex(2, 2, 2):
            ref[o] += dy[o, i, j, k] * xp[:, 2 * i:2 * i + 4, 2 * j:2 * j + 4, 2 * k:2 * k + 4]
    assert np.allclose(dw, ref)
    with pytest.raises(ValueError):
        net3d.conv_down_forward(np.ones((1, 3, 4, 4)), np.ones((1, 1, 4, 4, 4)))


def test_upsample_constant_and_average():
    x = np.full((2, 3, 4, 5), 1.75)
    u = net3d.upsample(x)
    assert u.shape == (2, 6, 8, 10) and np.allclose(u, 1.75)
    w = np.full((1, 2, 3, 3, 3), 1 / 54)
    y, _ = net3d.upconv_forward(x, w)
    assert np.allclose(y[0, 1:-1, 1:-1, 1:-1], 1.75)


def test_upsample_adjoint_random(rng):
    for _ in range(3):
        x = rng.normal(size=(2, 3, 4, 2))
        y = rng.normal(size=(2, 6, 8, 4))
        lhs = np.sum(net3d.upsample(x) * y)
        rhs = np.sum(x * net3d.upsample_adjoint(y))
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)


@pytest.mark.parametrize("check", [check_upsample_adjoint, check_conv_down, check_conv_direct,
                                   check_upconv, check_batchnorm, check_activations])
def test_layer_gradchecks(check):
    r = check()
    assert r.passed, r.line()


def _f32_vs_f64_fd(fwd, bwd, shapes, rng):
    """Analytic gradients computed in float32 vs float64 central differences."""
    args64 = [rng.normal(size=s) for s in shapes]
    args32 = [a.astype(np.float32) for a in args64]
    args64 = [a.astype(np.float64) for a in args32]
    R = rng.normal(size=np.shape(fwd(*args64)))
    grads = bwd(R.astype(np.float32), *args32)
    worst = 0.0
    for a, g in zip(args64, grads):
        idx = rng.choice(a.size, min(30, a.size), replace=False)
        fd = central_diff(lambda _: float(np.sum(fwd(*args64) * R)), a, 1e-6, idx)
        worst = max(worst, rel_error(np.ravel(g)[idx], fd))
    return worst


def test_layer_gradients_binary32(rng):
    err = _f32_vs_f64_fd(lambda x, w: net3d.conv_down_forward(x, w),
                         lambda R, x, w: net3d.conv_down_backward(R, x, w)[:2],
                         [(2, 8, 8, 8), (3, 2, 4, 4, 4)], rng)
    assert err < 1e-3
    err = _f32_vs_f64_fd(lambda x, w: net3d.upconv_forward(x, w)[0],
                         lambda R, x, w: net3d.upconv_backward(R, net3d.upconv_forward(x, w)[1], w)[:2],
                         [(3, 4, 4, 4), (6, 3, 3, 3, 3)], rng)
    assert err < 1e-3


def test_small_layers():
    x = np.array([-2.0, 3.0]).reshape(2, 1, 1, 1)
    assert net3d.leaky_relu_forward(x, 0.2).ravel().tolist() == [-0.4, 3.0]
    z = np.random.default_rng(0).normal(size=(2, 4, 4, 4))
    z = (z - z.mean(axis=(1, 2, 3), keepdims=True)) / z.std(axis=(1, 2, 3), keepdims=True)
    y, _ = net3d.batchnorm_forward(z, np.ones(2), np.zeros(2))
    assert np.allclose(y, z, atol=1e-5)
    assert net3d.dropout_mask((3,), 0.0, np.random.default_rng(0), np.float64) is None
    m1 = net3d.dropout_mask((50,), 0.5, np.random.default_rng(3), np.float64)
    m2 = net3d.dropout_mask((50,), 0.5, np.random.default_rng(3), np.float64)
    assert np.array_equal(m1, m2) and set(np.unique(m1)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        net3d.concat_forward(np.ones((1, 2, 2, 2)), np.ones((1, 2, 2, 3)))


def test_batchnorm_running_stats():
    x = np.random.default_rng(1).normal(2.0, 3.0, size=(1, 4, 4, 4))
    rm, rv = np.zeros(1), np.ones(1)
    net3d.batchnorm_forward(x, np.ones(1), np.zeros(1), running=(rm, rv), momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


TINY = dict(in_channels=3, base_width=2, depth=2, input_size=(8, 8, 8))


def test_network_shapes_and_nonnegative(rng):
    for depth, size in ((1, 4), (2, 8), (3, 16)):
        m = UNet3D(NetConfig(in_channels=2, base_width=2, depth=depth, input_size=(size,) * 3), 0)
        out = m.forward(rng.normal(size=(2, size, size, size)))
        assert out.shape == (size,) * 3 and out.min() >= 0
    with pytest.raises(ValueError):
        NetConfig(depth=3, input_size=(12, 16, 16))
    m = UNet3D(NetConfig(**TINY), 0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 8, 8, 8)))


def test_eval_deterministic_and_train_differs(rng):
    m = UNet3D(NetConfig(**TINY), 1)
    x = rng.normal(size=(3, 8, 8, 8))
    assert np.array_equal(m.forward(x), m.forward(x))


def test_param_count_regression():
    assert UNet3D(NetConfig(**TINY), 0).param_count() == 1235
    cfg = NetConfig(in_channels=8, base_width=16, depth=4, input_size=(64, 64, 64))
    m = UNet3D(cfg, 0)
    assert m.param_count() == sum(p.size for p in m.params.values())
    assert UNet3D(cfg, 5).param_count() == m.param_count()


def test_backward_rules(rng):
    m = UNet3D(NetConfig(**TINY), 2)
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((8, 8, 8)))
    x = rng.normal(size=(3, 8, 8, 8))
    m.forward(x, train=True, rng=np.random.default_rng(0))
    g = m.backward(np.zeros((8, 8, 8)))
    assert all(not np.any(v) for v in g.values())
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((8, 8, 8)))      # tape consumed


def test_duplicate_step_bit_identical(rng):
    x = rng.normal(size=(3, 8, 8, 8)).astype(np.float32)
    dout = rng.normal(size=(8, 8, 8))
    grads = []
    for _ in range(2):
        m = UNet3D(NetConfig(**TINY), 7)
        m.forward(x, train=True, rng=np.random.default_rng(11))
        grads.append(m.backward(dout))
    assert all(np.array_equal(grads[0][k], grads[1][k]) for k in grads[0])


@pytest.mark.parametrize("dtype, tol", [("float32", 1e-2), ("float64", 1e-4)])
def test_network_gradient(dtype, tol):
    r = check_network(dtype, tol=tol)
    assert r.passed, r.line()


def test_checkpoint_roundtrip(tmp_path, rng):
    m = UNet3D(NetConfig(**TINY), 3)
    x = rng.normal(size=(3, 8, 8, 8))
    m.forward(x, train=True, rng=rng)          # touch running stats
    net3d.save_checkpoint(tmp_path / "m.bin", m, {"epoch": 4})
    back, head = net3d.load_model(tmp_path / "m.bin")
    assert head["epoch"] == 4 and back.cfg == m.cfg
    for k, v in m.state_arrays():
        assert np.array_equal(dict(back.state_arrays())[k], v)
    assert np.array_equal(back.forward(x), m.forward(x))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(ValueError, match="trailing"):
        net3d.read_checkpoint(tmp_path / "bad.bin")
