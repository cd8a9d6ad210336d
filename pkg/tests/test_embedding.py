import numpy as np
import pytest
from hypothesis import given, strategies as st

from inckoop.embedding import (EmbeddingNet, backward, embed_backward, embed_forward, forward,
                               init_net, param_shapes, zero_net)
from inckoop.errors import BadDims, ShapeMismatch

from oracles import finite_diff


def unit_net():
    p = {k: np.ones(s) for k, s in param_shapes(1, 2, 1, 1).items()}
    for k in p:
        if k.startswith("b"):
            p[k][:] = 0.0
    return EmbeddingNet(1, 2, 1, 1, p)


class TestForward:
    def test_zero_net_pads_zeros(self):
        net = zero_net(2, 5, 8, 2)
        assert np.array_equal(embed_forward(net, [0.3, -0.7]), [0.3, -0.7, 0, 0, 0])

    def test_no_lift_is_identity(self):
        net = init_net(3, 3, 16, 2, seed=0)
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(embed_forward(net, x), x)

    def test_hand_computed_block(self):
        # h0 = 1, a = relu(1) = 1, h1 = relu(1 + 1) = 2, y = 2
        assert np.array_equal(embed_forward(unit_net(), [1.0]), [1.0, 2.0])

    def test_negative_input_clipped_by_relu(self):
        # h0 = -1, a = 0, h1 = relu(-1) = 0
        assert np.array_equal(embed_forward(unit_net(), [-1.0]), [-1.0, 0.0])

    def test_zero_blocks_is_affine(self, rng):
        net = init_net(2, 6, 5, 0, seed=1)
        X = rng.standard_normal((7, 2))
        p = net.params
        expect = (X @ p["W_in"].T + p["b_in"]) @ p["W_out"].T + p["b_out"]
        assert np.allclose(forward(net, X)[:, 2:], expect, atol=1e-14)

    @given(st.integers(1, 4), st.integers(0, 5), st.integers(0, 3), st.integers(0, 2**31))
    def test_prefix_is_input(self, n_in, extra, blocks, seed):
        net = init_net(n_in, n_in + extra, 7, blocks, seed=seed)
        X = np.random.default_rng(seed).standard_normal((4, n_in))
        Z = forward(net, X)
        assert Z.shape == (4, n_in + extra)
        assert np.array_equal(Z[:, :n_in], X)

    def test_shape_errors(self):
        net = init_net(2, 4, 3, 1, seed=0)
        with pytest.raises(ShapeMismatch):
            forward(net, np.zeros((3, 3)))
        with pytest.raises(BadDims):
            init_net(3, 2, 4, 1, seed=0)


class TestInit:
    def test_bounds_and_biases(self):
        net = init_net(3, 10, 64, 2, seed=4)
        for k, v in net.params.items():
            if k.startswith("W"):
                assert np.all(np.abs(v) <= np.sqrt(6.0 / v.shape[1]))
            else:
                assert np.all(v == 0)

    def test_deterministic(self):
        assert init_net(2, 8, 16, 2, seed=[3, 0]) == init_net(2, 8, 16, 2, seed=[3, 0])
        assert init_net(2, 8, 16, 2, seed=1) != init_net(2, 8, 16, 2, seed=2)


class TestBackward:
    @pytest.mark.parametrize("blocks", [0, 1, 2])
    def test_parameter_gradients_match_finite_differences(self, blocks, rng):
        net = init_net(2, 5, 6, blocks, seed=11)
        for k in net.params:
            if k.startswith("b"):
                net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
        X = rng.standard_normal((5, 2))
        up = rng.standard_normal((5, 5))
        _, cache = forward(net, X, cache=True)
        g = backward(net, cache, up)
        for name in net.params:
            def f(v, name=name):
                trial = net.copy()
                trial.params[name] = v
                return float(np.sum(forward(trial, X) * up))
            fd = finite_diff(f, net.params[name])
            assert np.allclose(g.params[name], fd, rtol=1e-5, atol=1e-6), name

    def test_input_gradient(self, rng):
        net = init_net(3, 7, 8, 2, seed=5)
        x = rng.standard_normal(3)
        up = rng.standard_normal(7)
        g = embed_backward(net, x, up)
        fd = finite_diff(lambda v: float(embed_forward(net, v) @ up), x)
        assert np.allclose(g.x, fd, rtol=1e-5, atol=1e-7)

    def test_gradients_sum_over_batch(self, rng):
        net = init_net(2, 4, 5, 1, seed=2)
        X = rng.standard_normal((3, 2))
        up = rng.standard_normal((3, 4))
        _, cache = forward(net, X, cache=True)
        full = backward(net, cache, up)
        parts = [embed_backward(net, X[i], up[i]) for i in range(3)]
        for k in net.params:
            assert np.allclose(full.params[k], sum(p.params[k] for p in parts), atol=1e-12)

    def test_relu_kink_uses_zero_derivative(self):
        # x = 0 puts every pre-activation at exactly 0
        g = embed_backward(unit_net(), [0.0], [0.0, 1.0])
        assert g.x[0] == 0.0
        assert g.params["W_in"][0, 0] == 0.0

    def test_upstream_shape_checked(self):
        net = init_net(2, 4, 3, 1, seed=0)
        _, cache = forward(net, np.zeros((2, 2)), cache=True)
        with pytest.raises(ShapeMismatch):
            backward(net, cache, np.zeros((2, 3)))
