import numpy as np
import pytest

from svpsf import nn
from svpsf.estimator import _batch_loss_and_grad


def micro_net(seed=0):
    """Tiny regressor in float64 for finite-difference comparisons."""
    return nn.build_regressor_net(
        2, stem=2, blocks=(3,), dense=4, seed=seed, dtype=np.float64
    )


def batch_loss(net, X, a0, an, gamma=1.0):
    raw = net.forward(X).astype(np.float64)
    return _batch_loss_and_grad(raw, a0, an, gamma)


def test_forward_shapes():
    net = nn.build_regressor_net(4, stem=8, blocks=(8, 16, 32), dense=16, seed=0)
    out = net.forward(np.zeros((5, 64, 64, 1), dtype=np.float32))
    assert out.shape == (5, 4)


def test_backprop_matches_central_differences():
    rng = np.random.default_rng(42)
    net = micro_net()
    X = rng.normal(size=(3, 4, 4, 1))
    a0 = np.array([0.0, 1.0, 0.0])
    an = rng.uniform(0.2, 0.8, size=(3, 1))

    loss0, draw = batch_loss(net, X, a0, an)
    net.backward(draw)
    analytic = [grad.copy() for _, _, grad in net.params()]

    eps = 1e-6
    worst = 0.0
    for (name, value, _), grads in zip(net.params(), analytic):
        flat = value.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            lp, _ = batch_loss(net, X, a0, an)
            flat[i] = keep - eps
            lm, _ = batch_loss(net, X, a0, an)
            flat[i] = keep
            numeric = (lp - lm) / (2 * eps)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    print(f"worst relative gradient error: {worst:.3e}")
    assert worst <= 1e-4


def test_gradients_masked_for_invalid_samples():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(4, 3))
    a0 = np.array([0.0, 1.0, 1.0, 0.0])
    an = rng.uniform(size=(4, 2))
    _, draw = _batch_loss_and_grad(raw, a0, an, gamma=1.0)
    assert np.all(draw[1, 1:] == 0.0)
    assert np.all(draw[2, 1:] == 0.0)
    assert np.any(draw[0, 1:] != 0.0)


def test_adam_zero_gradient_is_identity():
    net = micro_net(seed=3)
    opt = nn.Adam(net, lr=0.01)
    before = net.get_weights()
    for _, _, grad in net.params():
        grad[...] = 0.0
    opt.step()
    for b, (_, value, _) in zip(before, net.params()):
        assert np.array_equal(b, value)


def test_adam_step_descends_quadratic():
    # minimize ||W||^2 on a single dense layer: every step must shrink it
    rng = np.random.default_rng(5)
    layer = nn.Dense(4, 4, rng=rng, dtype=np.float64)
    net = nn.Network([layer])
    opt = nn.Adam(net, lr=0.05)
    norms = []
    for _ in range(50):
        layer.dW[...] = 2 * layer.W
        layer.db[...] = 2 * layer.b
        opt.step()
        norms.append(float(np.sum(layer.W**2)))
    assert norms[-1] < norms[0] * 0.1


def test_weight_round_trip_and_count():
    net = nn.build_regressor_net(2, stem=4, blocks=(4, 8), dense=8, seed=7)
    weights = net.get_weights()
    other = nn.build_regressor_net(2, stem=4, blocks=(4, 8), dense=8, seed=99)
    other.set_weights(weights)
    x = np.random.default_rng(0).normal(size=(2, 16, 16, 1)).astype(np.float32)
    out_a = net.forward(x.copy()).copy()
    out_b = other.forward(x.copy())
    assert np.array_equal(out_a, out_b)
    assert net.n_weights() == sum(w.size for w in weights)


def test_set_weights_validates_shapes():
    net = micro_net()
    with pytest.raises(ValueError):
        net.set_weights([np.zeros((2, 2))])


def test_conv_stride_downsamples():
    rng = np.random.default_rng(0)
    conv = nn.Conv2d(1, 2, 3, stride=2, rng=rng)
    out = conv.forward(np.zeros((1, 64, 64, 1), dtype=np.float32))
    assert out.shape == (1, 32, 32, 2)


def test_conv_matches_naive_reference():
    rng = np.random.default_rng(8)
    conv = nn.Conv2d(3, 5, 3, stride=2, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 9, 9, 3))
    out = conv.forward(x).copy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    Ho = Wo = (9 + 2 - 3) // 2 + 1
    ref = np.zeros((2, Ho, Wo, 5))
    for i in range(Ho):
        for j in range(Wo):
            window = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            for t in range(9):
                dy, dx = divmod(t, 3)
                ref[:, i, j, :] += window[:, dy, dx, :] @ conv.W[t]
    ref += conv.b
    assert np.abs(out - ref).max() < 1e-12
