import numpy as np
import pytest

from modreach.gradcheck import fd_check_network, rel_error
from modreach.nn import (
    Conv2D,
    Dense,
    Network,
    ReLU,
    RMSProp,
    ShapeError,
    Sigmoid,
    build_network,
    control_spec,
    perception_spec,
    quadratic_loss,
)


def test_fc_identity():
    fc = Dense(4, 4, dtype=np.float64)
    fc.W[...] = np.eye(4)
    fc.b[...] = 0
    x = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(Network([fc], [4]).forward(x), x)


def test_relu():
    out = ReLU().forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_conv_constant():
    conv = Conv2D(1, 1, 3, 1, dtype=np.float64)
    conv.W[...] = 1.0
    conv.b[...] = 0.0
    out = conv.forward(np.ones((1, 5, 5, 1)))
    assert out.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(out[..., 0], np.full((1, 3, 3), 9.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    conv = Conv2D(2, 3, 4, 2, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 10, 10, 2))
    out = conv.forward(x)
    W = conv.W.reshape(4, 4, 2, 3)
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for i in range(4):
            for j in range(4):
                patch = x[n, 2 * i : 2 * i + 4, 2 * j : 2 * j + 4, :]
                ref[n, i, j] = np.tensordot(patch, W, axes=3) + conv.b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(1)
    net = build_network(control_spec(3), rng, dtype=np.float64)
    net.forward(rng.random((3, 5)))
    gx = net.backward(np.zeros((3, 9)))
    assert not np.any(gx)
    assert all(not np.any(g) for g in net.grads())


def test_fc_closed_form_gradient():
    rng = np.random.default_rng(2)
    fc = Dense(3, 2, rng=rng, dtype=np.float64)
    net = Network([fc], [3])
    x = rng.standard_normal((1, 3))
    t = rng.standard_normal((1, 2))
    y = net.forward(x)
    _, g = quadratic_loss(y, t)
    net.backward(g)
    np.testing.assert_allclose(fc.grads[0], np.outer(x[0], y[0] - t[0]), rtol=0, atol=1e-12)
    np.testing.assert_allclose(fc.grads[1], (y - t)[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "layers,shape",
    [
        ([{"kind": "fc", "out": 4}], [6]),
        ([{"kind": "fc", "out": 4}, {"kind": "relu"}], [6]),
        ([{"kind": "fc", "out": 4}, {"kind": "sigmoid"}], [6]),
        ([{"kind": "conv", "out": 3, "kernel": 3, "stride": 1}], [7, 7, 2]),
        ([{"kind": "conv", "out": 3, "kernel": 4, "stride": 2}], [10, 10, 2]),
        ([{"kind": "conv", "out": 2, "kernel": 3, "stride": 2}], [9, 9, 1]),
    ],
)
def test_layer_gradients(layers, shape):
    net = build_network({"input_shape": shape, "layers": layers}, np.random.default_rng(3), dtype=np.float64)
    assert fd_check_network(net, np.random.default_rng(4), n_params=60) <= 1e-4


def test_full_network_gradients():
    rng = np.random.default_rng(5)
    for spec in (perception_spec(3), control_spec(3)):
        net = build_network(spec, rng, dtype=np.float64)
        assert fd_check_network(net, rng, n_params=100, batch=2) <= 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(6)
    net = build_network(perception_spec(2, image=36), rng, dtype=np.float64)
    x = rng.random((2, 36, 36, 1))
    g1, g2 = rng.standard_normal((2, 2, 4))
    a, b = 0.7, -1.9
    net.forward(x)
    gx1 = net.backward(g1)
    p1 = [g.copy() for g in net.grads()]
    gx2 = net.backward(g2)
    p2 = [g.copy() for g in net.grads()]
    gx = net.backward(a * g1 + b * g2)
    np.testing.assert_allclose(gx, a * gx1 + b * gx2, atol=1e-10)
    for g, u, v in zip(net.grads(), p1, p2):
        np.testing.assert_allclose(g, a * u + b * v, atol=1e-10)


def test_backward_before_forward():
    net = build_network(control_spec(1), np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 3)))


def test_shape_mismatch():
    net = build_network(control_spec(3), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        build_network({"input_shape": [5], "layers": [{"kind": "conv", "out": 2, "kernel": 3}]})


def test_architectures():
    p = build_network(perception_spec(3), np.random.default_rng(0))
    assert [l.kind for l in p.layers] == ["conv", "relu", "conv", "relu", "conv", "relu", "fc", "sigmoid"]
    assert p.output_shape == (5,)
    c = build_network(control_spec(3), np.random.default_rng(0))
    assert [getattr(l, "n_out", None) for l in c.layers if l.kind == "fc"] == [400, 300, 9]


def test_sigmoid_head_in_unit_interval():
    net = build_network(perception_spec(3), np.random.default_rng(0))
    out = net.forward(np.random.default_rng(1).random((4, 84, 84, 1)) * 50)
    assert out.min() >= 0 and out.max() <= 1


def test_debug_mode_rejects_nan():
    net = build_network(control_spec(1), np.random.default_rng(0), debug=True)
    with pytest.raises(FloatingPointError):
        net.forward(np.array([[np.nan, 0.0, 0.0]], dtype=np.float32))


def test_quadratic_loss_examples():
    assert quadratic_loss(np.ones((3, 2)), np.ones((3, 2)))[0] == 0.0
    loss, grad = quadratic_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert loss == 0.5
    np.testing.assert_array_equal(grad, [[1.0, 0.0]])
    p, t = np.array([[0.3, -0.2]]), np.array([[0.1, 0.5]])
    assert quadratic_loss(np.repeat(p, 2, 0), np.repeat(t, 2, 0))[0] == pytest.approx(quadratic_loss(p, t)[0])
    with pytest.raises(ValueError):
        quadratic_loss(np.zeros((0, 2)), np.zeros((0, 2)))


def test_rmsprop_zero_grad():
    p = np.array([1.0, -2.0])
    opt = RMSProp([p], lr=0.01)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_rmsprop_hand_values():
    p = np.array([0.0])
    opt = RMSProp([p], lr=0.01, rho=0.9, eps=1e-6)
    opt.step([np.array([1.0])])
    assert opt.acc[0][0] == pytest.approx(0.1, abs=1e-15)
    assert p[0] == pytest.approx(-0.01 / np.sqrt(0.1 + 1e-6), rel=1e-12)
    opt.step([np.array([1.0])])
    assert opt.acc[0][0] == pytest.approx(0.19, abs=1e-15)


def test_rmsprop_sign_symmetry():
    rng = np.random.default_rng(7)
    g = rng.standard_normal(10)
    acc0 = np.abs(rng.standard_normal(10))
    p1, p2 = np.zeros(10), np.zeros(10)
    o1, o2 = RMSProp([p1], lr=0.05), RMSProp([p2], lr=0.05)
    o1.load_state([acc0])
    o2.load_state([acc0])
    o1.step([g])
    o2.step([-g])
    np.testing.assert_array_equal(p1, -p2)
    assert np.all(o1.acc[0] >= 0)


def test_rmsprop_rejects_nonfinite_in_debug():
    opt = RMSProp([np.zeros(2)], debug=True)
    with pytest.raises(FloatingPointError):
        opt.step([np.array([np.inf, 0.0])])


def test_training_determinism():
    def run():
        rng = np.random.default_rng(11)
        net = build_network(control_spec(2), rng)
        opt = RMSProp(net.params(), lr=1e-3)
        data = np.random.default_rng(12)
        for _ in range(50):
            x = data.random((16, 4)).astype(np.float32)
            _, g = quadratic_loss(net.forward(x), data.random((16, 6)).astype(np.float32))
            net.backward(g, input_grad=False)
            opt.step(net.grads())
        return [p.copy() for p in net.params()]

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_rel_error_convention():
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, -1.0) == 1.0
