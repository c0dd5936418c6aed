import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsiconvlstm import layers as L
from hsiconvlstm.gradcheck import numerical_gradient, relative_error
from hsiconvlstm.tensor import SAME, VALID, ConvGeometry, DimensionError


class TestDense:
    def test_flatten_3136_to_128(self, rng):
        layer = L.DenseLayer("dense", 3136, 128, rng)
        assert layer.forward(rng.standard_normal((2, 3136))).shape == (2, 128)

    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(L.dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_loop_oracle(self, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        expect = [[sum(x[n, i] * w[i, j] for i in range(4)) + b[j] for j in range(5)] for n in range(3)]
        np.testing.assert_allclose(L.dense_forward(x, w, b), expect, rtol=1e-13)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            L.dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


class TestSoftmaxLoss:
    def test_uniform(self):
        np.testing.assert_allclose(L.softmax(np.zeros((1, 3))), [[1 / 3] * 3], rtol=1e-15)

    def test_no_overflow(self):
        p = L.softmax(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(p)) and p[0, 0] == 1.0 and p[0, 1] < 1e-300

    def test_direct_formula(self):
        z = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(L.softmax(z[None])[0], np.exp(z) / np.exp(z).sum(), rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-500, 500)))
    def test_rows_are_distributions(self, z):
        p = L.softmax(z)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_needs_two_classes(self):
        with pytest.raises(DimensionError):
            L.softmax(np.zeros((2, 1)))

    def test_cross_entropy_values(self):
        assert L.cross_entropy(np.array([[0.0, 1.0, 0.0]]), [2]) == 0.0
        assert math.isclose(L.cross_entropy(np.full((2, 4), 0.25), [1, 3]), math.log(4), rel_tol=1e-15)
        assert math.isclose(L.cross_entropy(np.array([[0.7, 0.2, 0.1]]), [1]), 0.356675, abs_tol=1e-6)

    def test_cross_entropy_clamps_zero_probability(self):
        assert math.isclose(L.cross_entropy(np.array([[0.0, 1.0]]), [1]), -math.log(1e-12))

    def test_one_hot_targets_accepted(self):
        p = np.array([[0.6, 0.4]])
        assert L.cross_entropy(p, np.array([[1.0, 0.0]])) == L.cross_entropy(p, [1])

    def test_combined_gradient(self):
        np.testing.assert_array_equal(L.softmax_xent_backward(np.array([[0.5, 0.5]]), [1]), [[-0.5, 0.5]])
        assert not L.softmax_xent_backward(np.array([[0.0, 1.0]]), [2]).any()

    @pytest.mark.parametrize("seed", range(20))
    def test_combined_gradient_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        z = r.standard_normal((3, 4))
        y = r.integers(1, 5, size=3)

        def loss():
            return L.cross_entropy(L.softmax(z), y)

        analytic = L.softmax_xent_backward(L.softmax(z), y)
        assert relative_error(analytic, numerical_gradient(loss, z)) < 1e-6

    def test_one_hot_range(self):
        with pytest.raises(ValueError):
            L.one_hot([0, 1], 3)
        np.testing.assert_array_equal(L.one_hot([3, 1], 3), [[0, 0, 1], [1, 0, 0]])


class TestDropout:
    def test_rate_zero_and_inference_are_identity(self, rng):
        x = rng.standard_normal((10, 10))
        assert L.dropout_forward(x, 0.0, True, rng)[0] is x
        y, mask = L.dropout_forward(x, 0.7, False, rng)
        assert y is x and mask is None

    def test_mean_preserved(self):
        y, _ = L.dropout_forward(np.ones(100_000), 0.5, True, np.random.default_rng(3))
        assert abs(y.mean() - 1.0) < 0.05
        assert set(np.unique(y)) == {0.0, 2.0}

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            L.dropout_forward(np.ones(3), 1.0, True, np.random.default_rng(0))

    def test_backward_uses_mask(self, rng):
        x = rng.standard_normal(50)
        y, mask = L.dropout_forward(x, 0.3, True, rng)
        g = rng.standard_normal(50)
        np.testing.assert_array_equal(L.dropout_backward(g, mask), g * mask)


def _layer_gradcheck(layer, x, rng, training=False):
    seed = 5

    def run():
        return layer.forward(x, training=training, rng=np.random.default_rng(seed))

    proj = rng.standard_normal(run().shape)

    def loss():
        return float(np.sum(run() * proj))

    loss()
    dx = layer.backward(proj)
    errors = {"input": relative_error(dx, numerical_gradient(loss, x))}
    for name, arr in layer.params().items():
        errors[name] = relative_error(layer.grads[name], numerical_gradient(loss, arr))
    return errors


class TestLayerGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_conv_layer(self, seed):
        r = np.random.default_rng(seed)
        nd = 2 + seed % 2
        mode = SAME if seed % 3 else VALID
        layer = L.ConvLayer("c", ConvGeometry((2,) * nd, 1, mode), 2, 3, r)
        layer.b += 0.3
        x = r.standard_normal((2,) + (4,) * nd + (2,))
        assert max(_layer_gradcheck(layer, x, r).values()) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_layer(self, seed):
        r = np.random.default_rng(seed)
        layer = L.DenseLayer("d", 6, 4, r, activation="relu" if seed % 2 else None)
        layer.b += 0.2
        assert max(_layer_gradcheck(layer, r.standard_normal((3, 6)), r).values()) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_convlstm_layer(self, seed):
        r = np.random.default_rng(seed)
        sequence = seed % 2 == 0
        layer = L.ConvLstmLayer("l", (2, 2), 1, 2, r, sequence=sequence, return_mode="last_step" if seed % 4 == 0 else "all_steps")
        for arr in layer.params().values():
            arr += r.standard_normal(arr.shape) * 0.2
        x = r.standard_normal((2, 3, 4, 4, 1) if sequence else (2, 4, 4, 1))
        assert max(_layer_gradcheck(layer, x, r, training=True).values()) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_pool_dropout_flatten(self, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 5, 5, 2))
        for layer in (L.MaxPoolLayer("p", (2, 2), None, SAME), L.DropoutLayer("d", 0.4), L.FlattenLayer("f")):
            assert max(_layer_gradcheck(layer, x, r, training=True).values()) < 1e-4

    def test_convlstm_backward_needs_training_forward(self, rng):
        layer = L.ConvLstmLayer("l", (2, 2), 1, 2, rng)
        layer.forward(rng.standard_normal((1, 2, 3, 3, 1)), training=False)
        with pytest.raises(RuntimeError):
            layer.backward(np.zeros((1, 2, 3, 3, 2)))

    def test_dense_output_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            L.DenseLayer("d", 5, 2, rng).output_shape((4,))
