import numpy as np
import pytest

from abstract_spamlens_test import AbstractSpamLensTest, finite_difference, norm_relative_error, relative_error
from spamlens.errors import ShapeError
from spamlens.tensor_core import (
    LayerParams,
    OptimizerState,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu,
    relu_backward,
    rmsprop_step,
    sigmoid,
    sigmoid_backward,
)


def conv_layer(rng, k, in_channels, filters, dtype=np.float64):
    return LayerParams(
        "conv2d",
        rng.standard_normal((k, k, in_channels, filters)).astype(dtype),
        rng.standard_normal(filters).astype(dtype),
    )


def conv_reference(x, layer):
    kh, kw, _, filters = layer.weights.shape
    h, w = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((h, w, filters))
    for i in range(h):
        for j in range(w):
            for f in range(filters):
                out[i, j, f] = layer.bias[f] + np.sum(x[i : i + kh, j : j + kw, :] * layer.weights[..., f])
    return out


class TestConv2d(AbstractSpamLensTest):
    def test_output_shape_of_first_layer(self):
        layer = LayerParams("conv2d", np.zeros((3, 3, 3, 32), np.float32), np.zeros(32, np.float32))
        out = conv2d_forward(np.zeros((128, 128, 3), np.float32), layer)
        assert out.shape == (126, 126, 32)

    def test_one_by_one_identity(self):
        x = self.rng.standard_normal((5, 7, 1))
        layer = LayerParams("conv2d", np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(conv2d_forward(x, layer), x)

    def test_matches_nested_loops(self):
        x = self.rng.standard_normal((6, 6, 2))
        layer = conv_layer(self.rng, 3, 2, 3)
        np.testing.assert_allclose(conv2d_forward(x, layer), conv_reference(x, layer), atol=1e-6)

    def test_batched_input_matches_single(self):
        x = self.rng.standard_normal((4, 9, 8, 2))
        layer = conv_layer(self.rng, 3, 2, 5)
        batched = conv2d_forward(x, layer)
        for n in range(4):
            np.testing.assert_allclose(batched[n], conv2d_forward(x[n], layer), atol=1e-12)

    def test_channel_mismatch(self):
        layer = conv_layer(self.rng, 3, 2, 3)
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((6, 6, 3)), layer)

    def test_input_smaller_than_kernel(self):
        layer = conv_layer(self.rng, 5, 1, 1)
        with pytest.raises(ShapeError, match="height"):
            conv2d_forward(np.zeros((4, 8, 1)), layer)

    def test_zero_upstream_gives_zero_gradients(self):
        x = self.rng.standard_normal((6, 6, 2))
        layer = conv_layer(self.rng, 3, 2, 3)
        input_grad, weight_grad, bias_grad = conv2d_backward(x, layer, np.zeros((4, 4, 3)))
        assert not input_grad.any() and not weight_grad.any() and not bias_grad.any()

    def test_bias_gradient_sums_upstream(self):
        x = self.rng.standard_normal((6, 6, 1))
        layer = conv_layer(self.rng, 3, 1, 2)
        _, _, bias_grad = conv2d_backward(x, layer, np.ones((4, 4, 2)))
        np.testing.assert_array_equal(bias_grad, [16, 16])

    @pytest.mark.parametrize("trial", range(100))
    def test_gradients_match_finite_differences(self, trial):
        rng = np.random.default_rng(trial)
        x = rng.standard_normal((5, 6, 2))
        layer = conv_layer(rng, 3, 2, 3)
        upstream = rng.standard_normal((3, 4, 3))

        def loss():
            return float(np.sum(conv2d_forward(x, layer) * upstream))

        input_grad, weight_grad, bias_grad = conv2d_backward(x, layer, upstream)
        assert norm_relative_error(input_grad, finite_difference(loss, x)) < 1e-5
        assert norm_relative_error(weight_grad, finite_difference(loss, layer.weights)) < 1e-5
        assert norm_relative_error(bias_grad, finite_difference(loss, layer.bias)) < 1e-5

    def test_upstream_shape_mismatch(self):
        x = self.rng.standard_normal((6, 6, 2))
        layer = conv_layer(self.rng, 3, 2, 3)
        with pytest.raises(ShapeError):
            conv2d_backward(x, layer, np.zeros((5, 4, 3)))

    def test_input_gradient_can_be_skipped(self):
        x = self.rng.standard_normal((6, 6, 2))
        layer = conv_layer(self.rng, 3, 2, 3)
        input_grad, _, _ = conv2d_backward(x, layer, np.ones((4, 4, 3)), compute_input_grad=False)
        assert input_grad is None


class TestMaxPool(AbstractSpamLensTest):
    @pytest.mark.parametrize(
        "shape, expected",
        [((126, 126, 32), (63, 63, 32)), ((61, 61, 64), (30, 30, 64)), ((10, 10, 128), (5, 5, 128))],
    )
    def test_output_shapes(self, shape, expected):
        out, argmax = maxpool2d_forward(np.zeros(shape, np.float32))
        assert out.shape == expected
        assert argmax.shape == expected

    def test_window_max_and_argmax(self):
        window = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        out, argmax = maxpool2d_forward(window)
        assert out[0, 0, 0] == 4
        assert argmax[0, 0, 0] == 3

    def test_gradient_routed_to_winner(self):
        window = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        _, argmax = maxpool2d_forward(window)
        grad = maxpool2d_backward(argmax, np.ones((1, 1, 1)), window.shape)
        np.testing.assert_array_equal(grad[..., 0], [[0, 0], [0, 1]])

    def test_tie_goes_to_first_index(self):
        window = np.full((2, 2, 1), 7.0)
        _, argmax = maxpool2d_forward(window)
        grad = maxpool2d_backward(argmax, np.ones((1, 1, 1)), window.shape)
        np.testing.assert_array_equal(grad[..., 0], [[1, 0], [0, 0]])

    def test_dropped_rows_get_no_gradient(self):
        x = self.rng.standard_normal((5, 5, 2))
        out, argmax = maxpool2d_forward(x)
        upstream = self.rng.standard_normal(out.shape)
        grad = maxpool2d_backward(argmax, upstream, x.shape)
        assert not grad[4, :, :].any() and not grad[:, 4, :].any()
        assert grad.sum() == pytest.approx(upstream.sum())

    @pytest.mark.parametrize("trial", range(100))
    def test_gradient_matches_finite_differences(self, trial):
        rng = np.random.default_rng(trial)
        # distinct values keep the finite differences away from ties
        x = rng.permutation(128).reshape(8, 8, 2).astype(np.float64)
        out, argmax = maxpool2d_forward(x)
        upstream = rng.standard_normal(out.shape)

        def loss():
            return float(np.sum(maxpool2d_forward(x)[0] * upstream))

        grad = maxpool2d_backward(argmax, upstream, x.shape)
        np.testing.assert_allclose(grad, finite_difference(loss, x), atol=1e-6)

    def test_stale_indices(self):
        _, argmax = maxpool2d_forward(np.zeros((8, 8, 1)))
        with pytest.raises(ShapeError, match="stale"):
            maxpool2d_backward(argmax, np.zeros((4, 4, 1)), (6, 6, 1))

    def test_input_smaller_than_window(self):
        with pytest.raises(ShapeError):
            maxpool2d_forward(np.zeros((1, 4, 1)))


class TestDense(AbstractSpamLensTest):
    def test_parameter_count_of_hidden_layer(self):
        layer = LayerParams("dense", np.zeros((3200, 512), np.float32), np.zeros(512, np.float32))
        assert layer.param_count == 1_638_912

    def test_identity(self):
        x = self.rng.standard_normal(6)
        layer = LayerParams("dense", np.eye(6), np.zeros(6))
        np.testing.assert_array_equal(dense_forward(x, layer), x)

    def test_matches_nested_loops(self):
        x = self.rng.standard_normal(10)
        layer = LayerParams("dense", self.rng.standard_normal((10, 4)), self.rng.standard_normal(4))
        expected = [layer.bias[o] + sum(x[i] * layer.weights[i, o] for i in range(10)) for o in range(4)]
        np.testing.assert_allclose(dense_forward(x, layer), expected, atol=1e-6)

    def test_length_mismatch(self):
        layer = LayerParams("dense", np.zeros((10, 4)), np.zeros(4))
        with pytest.raises(ShapeError):
            dense_forward(np.zeros(9), layer)

    def test_zero_upstream(self):
        layer = LayerParams("dense", self.rng.standard_normal((5, 3)), np.zeros(3))
        grads = dense_backward(self.rng.standard_normal(5), layer, np.zeros(3))
        assert all(not g.any() for g in grads)

    def test_bias_gradient_equals_upstream(self):
        layer = LayerParams("dense", self.rng.standard_normal((5, 3)), np.zeros(3))
        upstream = self.rng.standard_normal(3)
        _, _, bias_grad = dense_backward(self.rng.standard_normal(5), layer, upstream)
        np.testing.assert_array_equal(bias_grad, upstream)

    @pytest.mark.parametrize("trial", range(100))
    def test_gradients_match_finite_differences(self, trial):
        rng = np.random.default_rng(trial)
        x = rng.standard_normal(6)
        layer = LayerParams("dense", rng.standard_normal((6, 4)), rng.standard_normal(4))
        upstream = rng.standard_normal(4)

        def loss():
            return float(np.sum(dense_forward(x, layer) * upstream))

        input_grad, weight_grad, bias_grad = dense_backward(x, layer, upstream)
        assert norm_relative_error(input_grad, finite_difference(loss, x)) < 1e-5
        assert norm_relative_error(weight_grad, finite_difference(loss, layer.weights)) < 1e-5
        assert norm_relative_error(bias_grad, finite_difference(loss, layer.bias)) < 1e-5


class TestActivationsAndLoss:
    def test_relu(self):
        assert relu(np.array(-1.0)) == 0
        assert relu(np.array(2.5)) == 2.5

    def test_relu_gradient_at_zero_is_zero(self):
        grad = relu_backward(np.array([-1.0, 0.0, 3.0]), np.ones(3))
        np.testing.assert_array_equal(grad, [0, 0, 1])

    def test_sigmoid(self):
        assert float(sigmoid(0.0)) == 0.5
        assert float(sigmoid_backward(0.0)) == 0.25

    def test_sigmoid_is_stable(self):
        tails = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(tails))
        assert 0 < tails[0] and tails[1] < 1

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_sigmoid_tails_keep_dtype(self, dtype):
        tails = sigmoid(np.array([-200.0, 40.0], dtype=dtype))
        assert tails.dtype == dtype
        assert 0 < tails[0] and tails[1] < 1

    def test_bce_values(self):
        loss, _ = bce_loss(0.5, 1)
        assert float(loss) == pytest.approx(np.log(2), abs=1e-4)
        loss, _ = bce_loss(1.0, 1)
        assert float(loss) < 1e-6

    def test_bce_gradient_matches_finite_differences(self):
        p = np.array([0.3])
        _, grad = bce_loss(p, 0)
        numeric = finite_difference(lambda: float(bce_loss(p, 0)[0][0]), p, h=1e-7)
        assert relative_error(grad, numeric) < 1e-6


class TestRmsprop:
    def test_first_step(self):
        params = {"w": np.zeros(1)}
        state = OptimizerState.zeros_like(params, learning_rate=1e-4)
        new_params, new_state = rmsprop_step(params, {"w": np.ones(1)}, state)
        assert new_state.accumulators["w"][0] == pytest.approx(0.1)
        assert new_params["w"][0] == pytest.approx(-3.1623e-4, rel=1e-4)

    def test_zero_gradient_keeps_parameters_and_decays_accumulator(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState(accumulators={"w": np.array([0.5, 0.5])})
        new_params, new_state = rmsprop_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(new_params["w"], params["w"])
        np.testing.assert_allclose(new_state.accumulators["w"], [0.45, 0.45])

    def test_inputs_are_not_modified_and_replay_is_identical(self):
        params = {"w": np.array([0.3, 0.1])}
        grads = {"w": np.array([0.2, -0.7])}
        state = OptimizerState.zeros_like(params)
        first = rmsprop_step(params, grads, state)
        second = rmsprop_step(params, grads, state)
        np.testing.assert_array_equal(first[0]["w"], second[0]["w"])
        np.testing.assert_array_equal(params["w"], [0.3, 0.1])
        assert not state.accumulators["w"].any()

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        state = OptimizerState.zeros_like(params)
        with pytest.raises(ShapeError):
            rmsprop_step(params, {"w": np.zeros(3)}, state)
