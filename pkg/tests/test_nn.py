import math

import numpy as np
import pytest

from dpworkbench import nn


def _random_model(rng, widths=None):
    if widths is None:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 6)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    spec = nn.ModelSpec(tuple(widths), seed=int(rng.integers(0, 2**31)))
    params = nn.init_params(spec)
    # nonzero biases so every parameter gets exercised
    params = nn.ModelParams(params.weights, tuple(rng.normal(0, 0.1, b.shape) for b in params.biases))
    return spec, params


def _example_loss(params, x, y):
    logits = nn.forward(params, x[None])[0]
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[y])


def _fd_check(params, x, y, g_groups, h=1e-6):
    groups = params.groups()
    worst = 0.0
    for gi, p in enumerate(groups):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in groups]
            minus = [q.copy() for q in groups]
            plus[gi][idx] += h
            minus[gi][idx] -= h
            fd = (_example_loss(nn.ModelParams.from_groups(plus), x, y)
                  - _example_loss(nn.ModelParams.from_groups(minus), x, y)) / (2 * h)
            an = g_groups[gi][idx]
            scale = max(abs(fd), abs(an), 1e-3)
            worst = max(worst, abs(fd - an) / scale)
    return worst


class TestInitAndShapes:
    def test_deterministic(self):
        spec = nn.ModelSpec((4, 3, 2), seed=7)
        a, b = nn.init_params(spec), nn.init_params(spec)
        for x, y in zip(a.groups(), b.groups()):
            assert np.array_equal(x, y)

    def test_shapes(self):
        p = nn.init_params(nn.ModelSpec((4, 3, 2)))
        assert p.n_layers == 2
        assert [w.shape for w in p.weights] == [(4, 3), (3, 2)]
        assert p.n_groups == 4

    def test_zero_biases_and_scale(self):
        p = nn.init_params(nn.ModelSpec((100, 50, 3)))
        assert all(np.all(b == 0) for b in p.biases)
        assert np.abs(p.weights[0]).max() <= 1 / math.sqrt(100)

    @pytest.mark.parametrize("widths", [(4,), (4, 0, 2), (4, 1)])
    def test_invalid_spec(self, widths):
        with pytest.raises(ValueError):
            nn.ModelSpec(widths)


class TestForward:
    def test_zero_params_give_zero_logits(self, rng):
        p = nn.init_params(nn.ModelSpec((5, 4, 3))).zeros_like()
        assert np.all(nn.forward(p, rng.random((6, 5))) == 0)

    def test_batch_independence(self, rng):
        _, p = _random_model(rng, (6, 5, 3))
        x = rng.random((8, 6))
        assert np.allclose(nn.forward(p, x[3:4])[0], nn.forward(p, x)[3], rtol=0, atol=1e-15)

    def test_identity_linear_layer(self, rng):
        p = nn.ModelParams((np.eye(3),), (np.zeros(3),))
        x = rng.random((4, 3))
        assert np.array_equal(nn.forward(p, x), x)

    def test_shape_mismatch(self, rng):
        _, p = _random_model(rng, (6, 3))
        with pytest.raises(ValueError):
            nn.forward(p, rng.random((2, 5)))

    def test_does_not_mutate(self, rng):
        _, p = _random_model(rng, (6, 4, 3))
        before = [g.copy() for g in p.groups()]
        nn.forward(p, rng.random((5, 6)))
        assert all(np.array_equal(a, b) for a, b in zip(before, p.groups()))


class TestGradients:
    def test_uniform_softmax_loss(self, rng):
        p = nn.init_params(nn.ModelSpec((5, 10))).zeros_like()
        loss, _ = nn.loss_and_per_example_grads(p, rng.random((7, 5)), rng.integers(0, 10, 7))
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_finite_differences_randomized(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            _, p = _random_model(rng)
            b = int(rng.integers(1, 4))
            x = rng.normal(size=(b, p.layer_widths[0]))
            y = rng.integers(0, p.layer_widths[-1], size=b)
            _, grads = nn.loss_and_per_example_grads(p, x, y)
            i = int(rng.integers(0, b))
            worst = max(worst, _fd_check(p, x[i], y[i], [g[i] for g in grads.groups]))
        assert worst < 1e-5

    def test_mean_matches_batch_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            _, p = _random_model(rng)
            x = rng.normal(size=(9, p.layer_widths[0]))
            y = rng.integers(0, p.layer_widths[-1], size=9)
            _, per = nn.loss_and_per_example_grads(p, x, y)
            _, full = nn.loss_and_grad(p, x, y)
            for a, b in zip(per.mean(), full):
                assert np.allclose(a, b, rtol=1e-8, atol=1e-14)

    def test_norms_shape_and_sign(self, rng):
        _, p = _random_model(rng, (4, 3, 2))
        _, g = nn.loss_and_per_example_grads(p, rng.random((5, 4)), rng.integers(0, 2, 5))
        n = g.norms()
        assert n.shape == (5, 4) and np.all(n >= 0)
        assert np.allclose(n[2, 0], np.linalg.norm(g.groups[0][2]))

    def test_empty_batch(self, rng):
        _, p = _random_model(rng, (4, 3, 2))
        _, g = nn.loss_and_per_example_grads(p, np.zeros((0, 4)), np.zeros(0, int))
        assert g.batch_size == 0 and g.norms().shape == (0, 4)

    def test_label_range(self, rng):
        _, p = _random_model(rng, (4, 2))
        with pytest.raises(ValueError):
            nn.loss_and_per_example_grads(p, rng.random((2, 4)), [0, 2])


class TestApplyUpdate:
    def _one(self, w):
        return nn.ModelParams((np.array([[w]]),), (np.array([0.0]),))

    def test_plain_sgd(self):
        p, _ = nn.apply_update(self._one(1.0), [np.array([[0.5]]), np.array([0.0])], 0.1)
        assert p.weights[0][0, 0] == pytest.approx(0.95)

    def test_zero_gradient_fixed_point(self, rng):
        _, p = _random_model(rng, (3, 2))
        q, _ = nn.apply_update(p, [np.zeros_like(g) for g in p.groups()], 0.5)
        assert all(np.array_equal(a, b) for a, b in zip(p.groups(), q.groups()))

    def test_momentum_recurrence(self):
        p = self._one(0.0)
        g = [np.array([[1.0]]), np.array([0.0])]
        p, v = nn.apply_update(p, g, 0.1, 0.9)
        assert v.weights[0][0, 0] == pytest.approx(1.0)
        p, v = nn.apply_update(p, g, 0.1, 0.9, v)
        assert v.weights[0][0, 0] == pytest.approx(1.9)
        assert p.weights[0][0, 0] == pytest.approx(-0.29)

    @pytest.mark.parametrize("lr,mom", [(0.0, 0.0), (0.1, 1.0), (0.1, -0.1)])
    def test_bad_hyperparameters(self, lr, mom):
        with pytest.raises(ValueError):
            nn.apply_update(self._one(1.0), [np.zeros((1, 1)), np.zeros(1)], lr, mom)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.apply_update(self._one(1.0), [np.zeros((2, 1)), np.zeros(1)], 0.1)


class TestEvaluate:
    def test_perfect_and_wrong(self, rng):
        _, p = _random_model(rng, (5, 4, 3))
        x = rng.random((50, 5))
        pred = nn.predict(p, x)
        assert nn.evaluate(p, x, pred) == 1.0
        assert nn.evaluate(p, x, (pred + 1) % 3) == 0.0

    def test_ties_pick_lowest_class(self):
        p = nn.init_params(nn.ModelSpec((2, 3))).zeros_like()
        assert np.all(nn.predict(p, np.ones((4, 2))) == 0)

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(9)
        _, p = _random_model(rng, (8, 16, 10))
        n, k = 20000, 10
        acc = nn.evaluate(p, rng.random((n, 8)), rng.integers(0, k, n))
        assert abs(acc - 1 / k) <= 3 * math.sqrt((1 / k) * (1 - 1 / k) / n)

    def test_empty(self, rng):
        _, p = _random_model(rng, (3, 2))
        with pytest.raises(ValueError):
            nn.evaluate(p, np.zeros((0, 3)), [])
