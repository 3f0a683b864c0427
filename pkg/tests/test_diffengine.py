import numpy as np
import pytest

from tenshom import diffengine as de
from tenshom.errors import TrainingError


def test_forward_channels_frozen_sine_layer():
    W = de.Tensor(np.array([[2 * np.pi]]))
    b = de.leaf(np.zeros(1))
    out_w = de.leaf(np.array([[1.0]]))
    out_b = de.leaf(np.zeros(1))
    nodes = np.array([0.0, 0.25, 1.0])
    u, du, d2u = de.forward_channels([(W, b, True), (out_w, out_b, False)], nodes, 2)
    assert abs(du.value[0, 0] - 2 * np.pi) <= 1e-12
    assert abs(d2u.value[0, 0]) <= 1e-12
    assert abs(u.value[0, 0] - u.value[0, 2]) <= 1e-15  # sin(0) vs sin(2*pi)


def _random_layers(rng, widths=(20, 20), p=3):
    sizes = [1, *widths, p]
    layers = []
    for l, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = np.sqrt(1 / nin)
        layers.append((de.leaf(rng.uniform(-s, s, (nout, nin))),
                       de.leaf(rng.uniform(-s, s, nout)),
                       l < len(widths)))
    return layers


def test_channels_match_finite_differences(rng):
    layers = _random_layers(rng)
    nodes = rng.uniform(0.1, 0.9, size=7)
    h = 1e-4
    u, du, d2u = de.forward_channels(layers, nodes, 2)
    up, _, _ = de.forward_channels(layers, nodes + h, 0)
    um, _, _ = de.forward_channels(layers, nodes - h, 0)
    fd1 = (up.value - um.value) / (2 * h)
    fd2 = (up.value - 2 * u.value + um.value) / (h * h)
    assert np.abs(fd1 - du.value).max() <= 1e-6 * max(1, np.abs(fd1).max())
    assert np.abs(fd2 - d2u.value).max() <= 1e-4 * max(1, np.abs(fd2).max())


def test_gradient_of_norm_wrt_scaling():
    # quadrature-normalized rank-1 factors: d/dc of (c^2 * 1) = 2c
    w = np.full(8, 1.0 / 8)
    phi = np.sin(np.linspace(0.3, 2.0, 8))
    phi = phi / np.sqrt((phi * phi * w).sum())
    c = de.leaf(np.array([0.7]))
    tab = de.Tensor(phi[None, :])
    contrib = (c.reshape(1, 1) * tab)
    sq = ((contrib * w) * contrib).sum()
    g = de.gradient(sq, de.ParamVector([("c", c)]))
    assert g[0] == pytest.approx(2 * 0.7, abs=1e-12)


def test_frozen_parameters_not_in_gradient(rng):
    frozen = de.Tensor(np.array([[2.0], [1.0]]))  # not a leaf
    lived = de.leaf(np.array([[3.0], [4.0]]))
    x = de.Tensor(np.array([[1.0, 2.0]]))
    loss = ((x @ frozen) * (x @ lived)).sum()
    params = de.ParamVector([("w", lived)])
    g = de.gradient(loss, params)
    assert g.shape == (2,)
    grads = de.backward(loss)
    assert id(frozen) not in grads


def test_directional_derivative_step_1e4(rng):
    layers = _random_layers(rng, widths=(8, 8), p=2)
    nodes = np.linspace(0.05, 0.95, 6)
    params = de.ParamVector(
        [(f"L{i}.{nm}", t) for i, (W, b, _) in enumerate(layers) for nm, t in (("W", W), ("b", b))]
    )

    def loss():
        u, du, d2u = de.forward_channels(layers, nodes, 2)
        return (u * du * d2u).sum() + (u * u).sum()

    g = de.gradient(loss(), params)
    v = rng.standard_normal(params.size)
    v /= np.linalg.norm(v)
    base = params.flatten()
    h = 1e-4
    params.assign(base + h * v)
    fp = float(loss().value)
    params.assign(base - h * v)
    fm = float(loss().value)
    params.assign(base)
    fd = (fp - fm) / (2 * h)
    assert abs(fd - g @ v) <= 1e-5 * max(1.0, abs(fd))


def test_every_parameter_gradcheck_small_model(rng):
    layers = _random_layers(rng, widths=(4, 4), p=2)
    nodes = np.linspace(0.1, 0.9, 5)
    params = de.ParamVector(
        [(f"L{i}.{nm}", t) for i, (W, b, _) in enumerate(layers) for nm, t in (("W", W), ("b", b))]
    )

    def loss():
        u, du, _ = de.forward_channels(layers, nodes, 2)
        return ((u + du) * (u + du)).sum()

    g = de.gradient(loss(), params)
    base = params.flatten()
    h = 3e-5
    for i in range(params.size):
        xp = base.copy(); xp[i] += h
        params.assign(xp)
        fp = float(loss().value)
        xm = base.copy(); xm[i] -= h
        params.assign(xm)
        fm = float(loss().value)
        params.assign(base)
        fd = (fp - fm) / (2 * h)
        assert abs(fd - g[i]) <= max(1e-5 * abs(fd), 1e-8)


def test_bitwise_determinism(rng):
    def build_and_run(seed):
        r = np.random.default_rng(seed)
        layers = _random_layers(r)
        nodes = np.linspace(0, 1, 9)
        params = de.ParamVector([("w0", layers[0][0]), ("b0", layers[0][1])])
        u, du, d2u = de.forward_channels(layers, nodes, 2)
        loss = (u * u + du * d2u).sum()
        return float(loss.value), de.gradient(loss, params)

    l1, g1 = build_and_run(42)
    l2, g2 = build_and_run(42)
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_param_vector_layout_roundtrip(rng):
    a = de.leaf(rng.standard_normal((2, 3)))
    b = de.leaf(rng.standard_normal(4))
    pv = de.ParamVector([("a", a), ("b", b)])
    assert pv.size == 10
    assert pv.layout() == [("a", (2, 3), 0), ("b", (4,), 6)]
    flat = pv.flatten()
    pv.assign(flat * 2)
    assert np.array_equal(a.value, (flat[:6] * 2).reshape(2, 3))
    with pytest.raises(ValueError):
        pv.assign(np.zeros(3))


def test_nonfinite_loss_raises():
    x = de.leaf(np.array([1.0]))
    bad = x / de.Tensor(np.array([0.0]))
    with pytest.raises(TrainingError):
        de.gradient(bad.sum(), de.ParamVector([("x", x)]))


def test_no_grad_context():
    x = de.leaf(np.array([2.0]))
    with de.no_grad():
        y = (x * x).sum()
    assert y.requires is False and y.parents == ()


def test_broadcasting_backward(rng):
    a = de.leaf(rng.standard_normal((3, 1, 4)))
    b = de.leaf(rng.standard_normal((5, 1)))
    loss = (a * b).sum()
    g = de.backward(loss)
    assert g[id(a)].shape == (3, 1, 4)
    assert g[id(b)].shape == (5, 1)
    assert np.allclose(g[id(a)], b.value.sum())
    assert np.allclose(g[id(b)], a.value.sum())


def test_concat_backward(rng):
    a = de.leaf(rng.standard_normal((2, 3)))
    b = de.leaf(rng.standard_normal((4, 3)))
    c = de.concat([a, b], axis=0)
    loss = (c * c).sum()
    g = de.backward(loss)
    assert np.allclose(g[id(a)], 2 * a.value)
    assert np.allclose(g[id(b)], 2 * b.value)
