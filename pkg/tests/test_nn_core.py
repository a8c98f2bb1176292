import numpy as np
import pytest

from msdlab.errors import NumericalError, ShapeError, ValidationError
from msdlab.nn_core import (
    AdamWState,
    Gradients,
    Mlp,
    adamw_step,
    clip_grad_norm,
    finite_diff_grad,
    mlp_backward,
    mlp_forward,
)
from tests.conftest import assert_grads_close


class TestMlp:
    def test_init_shapes(self, rng):
        net = Mlp.init([5, 7, 3], rng)
        assert [w.shape for w in net.weights] == [(7, 5), (3, 7)]
        assert [b.shape for b in net.biases] == [(7,), (3,)]
        assert net.num_params == 7 * 5 + 7 + 3 * 7 + 3

    def test_zero_net_outputs_zero(self):
        out, _ = mlp_forward(Mlp.zeros([4, 6, 2]), np.ones((3, 4)))
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_wrong_input_width_names_layer_zero(self, rng):
        net = Mlp.init([4, 6, 2], rng)
        with pytest.raises(ShapeError, match="layer 0"):
            mlp_forward(net, np.ones((3, 5)))

    def test_mismatched_weight_shape_rejected(self):
        with pytest.raises(ShapeError):
            Mlp([2, 3], [np.zeros((2, 3))], [np.zeros(3)])

    def test_flat_round_trip_is_bitwise(self, rng):
        net = Mlp.init([3, 5, 2], rng)
        again = Mlp.from_flat(net.layer_sizes, net.flatten())
        assert again.checksum() == net.checksum()
        for a, b in zip(net.parameters(), again.parameters()):
            assert np.array_equal(a, b)

    def test_from_flat_rejects_wrong_length(self):
        with pytest.raises(ShapeError):
            Mlp.from_flat([3, 2], np.zeros(7))

    def test_copy_is_independent(self, rng):
        net = Mlp.init([3, 4, 2], rng)
        other = net.copy()
        other.weights[0][0, 0] += 1.0
        assert net.checksum() != other.checksum()

    def test_trunk_shares_parameters(self, rng):
        net = Mlp.init([3, 4, 5, 2], rng)
        trunk = net.trunk()
        assert trunk.output_dim == 5
        assert trunk.weights[0] is net.weights[0]

    def test_trunk_needs_hidden_layer(self, rng):
        with pytest.raises(ShapeError):
            Mlp.init([3, 2], rng).trunk()


class TestForward:
    def test_identity_layer(self):
        net = Mlp([2, 2], [np.eye(2)], [np.zeros(2)])
        x = np.array([[0.7, -1.2]])
        assert np.array_equal(mlp_forward(net, x)[0], x)

    def test_constant_layer(self, rng):
        net = Mlp([3, 2], [np.zeros((2, 3))], [np.array([3.0, -1.0])])
        out, _ = mlp_forward(net, rng.standard_normal((4, 3)))
        assert np.array_equal(out, np.tile([3.0, -1.0], (4, 1)))

    def test_two_layers_by_hand(self):
        # hidden pre-activations (2, -1); silu(2) = 1.76159415595576, silu(-1) = -0.26894142136999
        net = Mlp(
            [2, 2, 1],
            [np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[1.0, 2.0]])],
            [np.zeros(2), np.array([0.5])],
        )
        out, cache = mlp_forward(net, np.array([[2.0, 1.0]]))
        np.testing.assert_allclose(cache.post_activations[0], [[1.76159415595576, -0.26894142136999]], rtol=1e-12)
        assert out[0, 0] == pytest.approx(1.76159415595576 - 2 * 0.26894142136999 + 0.5, rel=1e-12)

    def test_bitwise_deterministic(self, rng):
        net = Mlp.init([3, 8, 2], rng)
        x = rng.standard_normal((5, 3))
        assert np.array_equal(mlp_forward(net, x)[0], mlp_forward(net, x)[0])


class TestBackward:
    @pytest.mark.parametrize("seed", range(50))
    def test_parameter_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
        net = Mlp.init(sizes, rng)
        batch = int(rng.integers(1, 9))
        x = rng.standard_normal((batch, sizes[0]))
        target = rng.standard_normal((batch, sizes[-1]))

        def loss(n):
            out, _ = mlp_forward(n, x)
            return float(np.sum((out - target) ** 2))

        out, cache = mlp_forward(net, x)
        analytic = mlp_backward(net, cache, 2.0 * (out - target))
        assert_grads_close(analytic, finite_diff_grad(loss, net))

    def test_input_gradient_matches_finite_differences(self, rng):
        net = Mlp.init([3, 6, 2], rng)
        x = rng.standard_normal((2, 3))
        weights = rng.standard_normal((2, 2))
        _, cache = mlp_forward(net, x)
        analytic = mlp_backward(net, cache, weights).input_grad

        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-6
            xm[idx] -= 1e-6
            numeric[idx] = (np.sum(weights * mlp_forward(net, xp)[0]) - np.sum(weights * mlp_forward(net, xm)[0])) / 2e-6
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_finite_diff_of_parameter_sum_is_one(self, rng):
        net = Mlp.init([3, 4, 2], rng)
        grads = finite_diff_grad(lambda n: sum(float(np.sum(p)) for p in n.parameters()), net)
        np.testing.assert_allclose(grads.flatten(), 1.0, atol=1e-6)

    def test_finite_diff_of_squared_norm_is_twice_the_parameters(self, rng):
        net = Mlp.init([3, 4, 2], rng)
        grads = finite_diff_grad(lambda n: float(np.sum(n.flatten() ** 2)), net)
        np.testing.assert_allclose(grads.flatten(), 2.0 * net.flatten(), atol=1e-6)

    def test_finite_diff_of_constant_is_zero(self, rng):
        grads = finite_diff_grad(lambda n: 3.0, Mlp.init([2, 3, 1], rng))
        assert np.array_equal(grads.flatten(), np.zeros(grads.flatten().size))

    def test_finite_diff_restores_parameters(self, rng):
        net = Mlp.init([2, 3, 1], rng)
        before = net.checksum()
        finite_diff_grad(lambda n: float(np.sum(mlp_forward(n, np.ones((1, 2)))[0])), net)
        assert net.checksum() == before

    def test_backward_rejects_wrong_output_grad(self, rng):
        net = Mlp.init([2, 3, 1], rng)
        _, cache = mlp_forward(net, np.ones((4, 2)))
        with pytest.raises(ShapeError):
            mlp_backward(net, cache, np.ones((4, 2)))


class TestAdamW:
    def test_first_step_is_signed_lr(self, rng):
        net = Mlp.init([2, 2], rng)
        before = [p.copy() for p in net.parameters()]
        grads = Gradients([np.full((2, 2), 0.5)], [np.array([-2.0, 3.0])])
        state = AdamWState.for_net(net)
        adamw_step(state, net, grads, lr=0.1)
        assert state.step == 1
        for p, p0, g in zip(net.parameters(), before, grads.arrays()):
            np.testing.assert_allclose(p, p0 - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_weight_decay_is_decoupled(self, rng):
        net = Mlp.init([2, 2], rng)
        before = [p.copy() for p in net.parameters()]
        adamw_step(AdamWState.for_net(net), net, Gradients.zeros_like(net), lr=0.1, weight_decay=0.5)
        for p, p0 in zip(net.parameters(), before):
            np.testing.assert_allclose(p, p0 * (1 - 0.05), rtol=1e-12)

    def test_zero_gradient_without_decay_is_a_no_op(self, rng):
        net = Mlp.init([3, 4, 2], rng)
        before = net.checksum()
        adamw_step(AdamWState.for_net(net), net, Gradients.zeros_like(net), lr=1e-3)
        assert net.checksum() == before

    def test_non_finite_gradient_leaves_state_untouched(self, rng):
        net = Mlp.init([2, 2], rng)
        state = AdamWState.for_net(net)
        before = net.checksum()
        grads = Gradients.zeros_like(net)
        grads.weights[0][0, 0] = np.nan
        with pytest.raises(NumericalError):
            adamw_step(state, net, grads, lr=1e-3)
        assert net.checksum() == before
        assert state.step == 0

    @pytest.mark.parametrize("lr,wd", [(0.0, 0.0), (-1e-3, 0.0), (1e-3, -0.1)])
    def test_invalid_hyperparameters(self, rng, lr, wd):
        net = Mlp.init([2, 2], rng)
        with pytest.raises(ValidationError):
            adamw_step(AdamWState.for_net(net), net, Gradients.zeros_like(net), lr=lr, weight_decay=wd)

    def test_incongruent_gradients_rejected(self, rng):
        net = Mlp.init([2, 3, 2], rng)
        with pytest.raises(ShapeError):
            adamw_step(AdamWState.for_net(net), net, Gradients.zeros_like(Mlp.init([2, 4, 2], rng)), lr=1e-3)


class TestClip:
    def test_large_gradient_scaled_to_max_norm(self):
        grads = Gradients([np.array([[3.0, 4.0]])], [np.array([0.0])])
        clipped, scale = clip_grad_norm(grads, 1.0)
        assert scale == pytest.approx(0.2)
        assert clipped.global_norm() == pytest.approx(1.0)

    def test_small_gradient_untouched(self):
        grads = Gradients([np.array([[0.3, 0.4]])], [np.array([0.0])])
        clipped, scale = clip_grad_norm(grads, 1.0)
        assert scale == 1.0
        assert clipped is grads

    def test_max_norm_must_be_positive(self):
        with pytest.raises(ValidationError):
            clip_grad_norm(Gradients([np.zeros((1, 1))], [np.zeros(1)]), 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_clipping_preserves_direction(self, seed):
        rng = np.random.default_rng(seed)
        grads = Gradients([rng.normal(0.0, 10.0, size=(4, 3))], [rng.normal(0.0, 10.0, size=4)])
        clipped, _ = clip_grad_norm(grads, 0.5)
        a, b = grads.flatten(), clipped.flatten()
        cosine = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cosine == pytest.approx(1.0, abs=1e-12)
        assert clipped.global_norm() == pytest.approx(0.5, abs=1e-12)

    def test_single_value_capped(self):
        clipped, _ = clip_grad_norm(Gradients([np.array([[20.0]])], [np.array([0.0])]), 10.0)
        assert clipped.weights[0][0, 0] == pytest.approx(10.0)
