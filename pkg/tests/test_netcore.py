import numpy as np
import pytest

from deskvar.errors import BadMagicError, NonFiniteLossError, ShapeMismatchError
from deskvar.netcore import CondNet, LayerSpec, TrainConfig, train_step


def _random_net(seed=0, modes=("film", "none"), bias=True):
    layers = [
        LayerSpec(6, 8, modes[0], bias),
        LayerSpec(8, 5, modes[1 % len(modes)], bias),
    ]
    net = CondNet(layers, cond_dim=3, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # nonzero gates and biases so every parameter matters
    for p in net.params:
        if "U" in p:
            p["U"] = 0.3 * rng.standard_normal(p["U"].shape)
        if "b" in p:
            p["b"] = 0.1 * rng.standard_normal(p["b"].shape)
    return net


def test_identity_linear_layer():
    net = CondNet([LayerSpec(4, 4, "none", bias=False)], cond_dim=1)
    net.params[0]["W"] = np.eye(4)
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(net.forward(x, np.zeros(1)), x)


def test_bias_free_film_zero_preservation():
    net = CondNet(
        [LayerSpec(4, 8, "film", bias=False), LayerSpec(8, 4, "film", bias=False)],
        cond_dim=2,
        seed=3,
    )
    rng = np.random.default_rng(4)
    for p in net.params:
        p["U"] = rng.standard_normal(p["U"].shape)
    for _ in range(5):
        c = rng.standard_normal(2)
        out = net.forward(np.zeros(4), c)
        np.testing.assert_array_equal(out, np.zeros(4))


def test_forward_matches_independent_matmul_oracle():
    net = _random_net(seed=7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal(6)
    c = rng.standard_normal(3)
    # straightforward re-implementation
    p0, p1 = net.params
    s0 = p0["W"] @ x + p0["b"]
    h0 = np.tanh(s0 * (1.0 + p0["U"] @ c))
    expected = p1["W"] @ h0 + p1["b"]
    np.testing.assert_allclose(net.forward(x, c), expected, atol=1e-12)


def test_linear_layer_input_gradient_is_wt_upstream():
    net = CondNet([LayerSpec(3, 5, "none", bias=False)], cond_dim=1, seed=1)
    rng = np.random.default_rng(2)
    x, u = rng.standard_normal(3), rng.standard_normal(5)
    _, dx = net.backward(x, np.zeros(1), u)
    np.testing.assert_allclose(dx, net.params[0]["W"].T @ u, atol=1e-13)


def test_zero_upstream_gives_zero_gradients():
    net = _random_net(seed=11)
    rng = np.random.default_rng(12)
    grads, dx = net.backward(rng.standard_normal(6), rng.standard_normal(3), np.zeros(5))
    np.testing.assert_array_equal(dx, 0.0)
    for g in grads:
        for v in g.values():
            np.testing.assert_array_equal(v, 0.0)


@pytest.mark.parametrize("modes", [("none", "none"), ("film", "none"), ("concat", "film")])
def test_gradients_match_central_finite_differences(modes):
    net = _random_net(seed=21, modes=modes)
    rng = np.random.default_rng(22)
    x = rng.standard_normal(6)
    c = rng.standard_normal(3)
    u = rng.standard_normal(5)
    grads, dx = net.backward(x, c, u)
    h = 1e-6

    def scalar(xv):
        return float(u @ net.forward(xv, c))

    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fd = (scalar(x + e) - scalar(x - e)) / (2 * h)
        assert abs(dx[k] - fd) <= 1e-6 * max(1.0, abs(fd))

    for li, p in enumerate(net.params):
        for key, arr in p.items():
            flat = arr.ravel()
            idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for k in idx:
                old = flat[k]
                flat[k] = old + h
                up = float(u @ net.forward(x, c))
                flat[k] = old - h
                dn = float(u @ net.forward(x, c))
                flat[k] = old
                fd = (up - dn) / (2 * h)
                got = grads[li][key].ravel()[k]
                assert abs(got - fd) <= 1e-6 * max(1.0, abs(fd))


def test_jvp_agrees_with_vjp_dot_product():
    net = _random_net(seed=31)
    rng = np.random.default_rng(32)
    x = rng.standard_normal(6)
    c = rng.standard_normal(3)
    for _ in range(20):
        dx = rng.standard_normal(6)
        u = rng.standard_normal(5)
        lhs = float(u @ net.jvp(x, c, dx))
        _, g = net.backward(x, c, u)
        rhs = float(dx @ g)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_batched_forward_matches_loop():
    net = _random_net(seed=41)
    rng = np.random.default_rng(42)
    X = rng.standard_normal((7, 6))
    C = rng.standard_normal((7, 3))
    Y = net.forward(X, C)
    for n in range(7):
        np.testing.assert_allclose(Y[n], net.forward(X[n], C[n]), atol=1e-13)


def test_train_step_zero_gradient_keeps_parameters():
    net = _random_net(seed=51)
    before = [{k: v.copy() for k, v in p.items()} for p in net.params]
    cfg = TrainConfig(lr=0.1, batch_size=4, epochs=1, seed=0)
    X = np.zeros((4, 6))
    C = np.zeros((4, 3))
    loss, _ = train_step(net, (X, C), lambda y: (0.0, np.zeros_like(y)), cfg)
    assert loss == 0.0
    for p, q in zip(net.params, before):
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])


def test_train_step_quadratic_convergence():
    # minimize (w - 3)^2 for a single scalar weight driven through the net
    net = CondNet([LayerSpec(1, 1, "none", bias=False)], cond_dim=1, seed=0)
    net.params[0]["W"][:] = 0.0
    cfg = TrainConfig(lr=0.1, batch_size=1, epochs=1, seed=0, grad_clip=1e9)
    X = np.ones((1, 1))
    C = np.zeros((1, 1))
    vel = None
    for _ in range(200):
        def loss_grad(y):
            w = y[0, 0]
            return (w - 3.0) ** 2, np.full_like(y, 2.0 * (w - 3.0))
        _, vel = train_step(net, (X, C), loss_grad, cfg, vel)
    assert abs(net.params[0]["W"][0, 0] - 3.0) < 1e-3


def test_train_step_deterministic_trajectory():
    def run():
        net = _random_net(seed=61)
        rng = np.random.default_rng(62)
        cfg = TrainConfig(lr=0.05, batch_size=3, epochs=1, seed=0)
        vel = None
        for _ in range(20):
            X = rng.standard_normal((3, 6))
            C = rng.standard_normal((3, 3))
            t = rng.standard_normal((3, 5))
            def loss_grad(y):
                d = y - t
                return float(np.mean(np.abs(d))), np.sign(d) / d.size
            _, vel = train_step(net, (X, C), loss_grad, cfg, vel)
        return net
    a, b = run(), run()
    for p, q in zip(a.params, b.params):
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])


def test_train_step_nonfinite_loss_aborts():
    net = _random_net(seed=71)
    cfg = TrainConfig(lr=0.1, batch_size=1, epochs=1, seed=0)
    before = [{k: v.copy() for k, v in p.items()} for p in net.params]
    with pytest.raises(NonFiniteLossError):
        train_step(net, (np.ones((1, 6)), np.ones((1, 3))),
                   lambda y: (np.nan, np.zeros_like(y)), cfg)
    for p, q in zip(net.params, before):
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])


def test_checkpoint_roundtrip(tmp_path):
    net = _random_net(seed=81, modes=("concat", "film"))
    path = tmp_path / "net.xcnn"
    net.save(path)
    back = CondNet.load(path)
    assert back.cond_dim == net.cond_dim
    assert back.layers == net.layers
    for p, q in zip(net.params, back.params):
        assert set(p) == set(q)
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])
    rng = np.random.default_rng(0)
    x, c = rng.standard_normal(6), rng.standard_normal(3)
    np.testing.assert_array_equal(net.forward(x, c), back.forward(x, c))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.xcnn"
    path.write_bytes(b"ZZZZ" + b"\x00" * 32)
    with pytest.raises(BadMagicError):
        CondNet.load(path)


def test_shape_mismatch_raises():
    net = _random_net(seed=91)
    with pytest.raises(ShapeMismatchError):
        net.forward(np.zeros(5), np.zeros(3))
    with pytest.raises(ShapeMismatchError):
        net.forward(np.zeros(6), np.zeros(2))
    with pytest.raises(ShapeMismatchError):
        net.backward(np.zeros(6), np.zeros(3), np.zeros(4))
