import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsiconvlstm.gradcheck import numerical_gradient, relative_error
from hsiconvlstm.tensor import (
    SAME,
    VALID,
    ConvGeometry,
    DimensionError,
    NumericError,
    add,
    check_finite,
    conv2d_forward,
    conv3d_forward,
    conv_backward,
    conv_forward,
    hadamard,
    maxpool_backward,
    maxpool_forward,
    output_extent,
    scale,
    sigmoid,
    tanh,
)
from oracles import conv_loop, maxpool_loop


class TestShapeAlgebra:
    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 64), k=st.integers(1, 6), s=st.integers(1, 4))
    def test_same_is_ceil(self, n, k, s):
        assert output_extent(n, k, s, SAME) == -(-n // s)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 64), k=st.integers(1, 6), s=st.integers(1, 4))
    def test_valid_is_floor(self, n, k, s):
        if k > n:
            with pytest.raises(DimensionError):
                output_extent(n, k, s, VALID)
        else:
            assert output_extent(n, k, s, VALID) == (n - k) // s + 1

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 4), s=st.integers(1, 3),
        mode=st.sampled_from([SAME, VALID]),
    )
    def test_forward_extents_follow_formula(self, h, w, k, s, mode):
        if mode == VALID and k > min(h, w):
            return
        geom = ConvGeometry((k, k), s, mode)
        y = conv_forward(np.ones((h, w, 1)), np.ones((k, k, 1, 2)), np.zeros(2), geom)
        assert y.shape == (output_extent(h, k, s, mode), output_extent(w, k, s, mode), 2)

    def test_table_examples(self):
        x = np.zeros((27, 27, 32))
        assert maxpool_forward(x, (2, 2), (2, 2), SAME)[0].shape == (14, 14, 32)
        assert maxpool_forward(x, (2, 2), (2, 2), VALID)[0].shape == (13, 13, 32)
        y = conv2d_forward(np.zeros((27, 27, 1)), np.zeros((4, 4, 1, 32)), np.zeros(32), ConvGeometry((4, 4)))
        assert y.shape == (27, 27, 32)
        y = conv3d_forward(np.zeros((10, 27, 27, 1)), np.zeros((4, 4, 4, 1, 32)), np.zeros(32), ConvGeometry((4, 4, 4)))
        assert y.shape == (10, 27, 27, 32)


class TestConvForward:
    def test_zero_input_gives_bias(self, rng):
        b = rng.standard_normal(5)
        y = conv_forward(np.zeros((6, 7, 3)), rng.standard_normal((3, 3, 3, 5)), b, ConvGeometry((3, 3)))
        np.testing.assert_array_equal(y, np.broadcast_to(b, y.shape))

    def test_ones_3x3(self):
        y = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), ConvGeometry((3, 3)))
        assert y[1, 1, 0] == 9.0
        assert y[0, 0, 0] == y[0, 2, 0] == y[2, 0, 0] == y[2, 2, 0] == 4.0

    def test_ones_2x2x2_valid(self):
        y = conv3d_forward(np.ones((2, 2, 2, 1)), np.ones((2, 2, 2, 1, 1)), np.zeros(1), ConvGeometry((2, 2, 2), 1, VALID))
        assert y.shape == (1, 1, 1, 1) and y.item() == 8.0

    @pytest.mark.parametrize(
        "shape,kernel,stride,modes",
        [
            ((5, 6, 2), (3, 3), (1, 1), (SAME, SAME)),
            ((7, 5, 1), (4, 4), (1, 1), (SAME, SAME)),
            ((7, 8, 3), (2, 3), (2, 3), (SAME, VALID)),
            ((4, 5, 6, 2), (2, 3, 2), (1, 2, 1), (SAME, SAME, VALID)),
            ((5, 5, 5, 1), (4, 4, 4), (1, 1, 1), (SAME, SAME, SAME)),
            ((9, 2), (3,), (2,), (SAME,)),
        ],
    )
    def test_matches_loop_oracle(self, rng, kernel_backend, shape, kernel, stride, modes):
        x = rng.standard_normal(shape)
        w = rng.standard_normal(kernel + (shape[-1], 3))
        b = rng.standard_normal(3)
        got = conv_forward(x, w, b, ConvGeometry(kernel, stride, modes))
        np.testing.assert_allclose(got, conv_loop(x, w, b, stride, modes), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        x = rng.standard_normal((2, 3, 6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        geom = ConvGeometry((3, 3))
        y = conv_forward(x, w, None, geom)
        assert y.shape == (2, 3, 6, 6, 4)
        np.testing.assert_allclose(y[1, 2], conv_forward(x[1, 2], w, None, geom), rtol=0, atol=1e-13)

    @pytest.mark.parametrize("nd", [2, 3])
    def test_linearity(self, rng, nd):
        shape = (6,) * nd + (2,)
        w = rng.standard_normal((3,) * nd + (2, 3))
        x, z = rng.standard_normal(shape), rng.standard_normal(shape)
        a, c = 1.7, -0.3
        geom = ConvGeometry((3,) * nd)
        lhs = conv_forward(a * x + c * z, w, None, geom)
        rhs = a * conv_forward(x, w, None, geom) + c * conv_forward(z, w, None, geom)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as err:
            conv_forward(np.zeros((5, 5, 2)), np.zeros((3, 3, 3, 1)), None, ConvGeometry((3, 3)))
        assert err.value.axis == 2

    def test_valid_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv_forward(np.zeros((2, 5, 1)), np.zeros((3, 3, 1, 1)), None, ConvGeometry((3, 3), 1, VALID))

    def test_bad_geometry(self):
        with pytest.raises(DimensionError):
            ConvGeometry((0, 3))
        with pytest.raises(ValueError):
            ConvGeometry((3, 3), 1, "reflect")


class TestConvBackward:
    def test_zero_grad_out(self, rng):
        x = rng.standard_normal((5, 5, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        dx, dw, db = conv_backward(x, w, np.zeros((5, 5, 4)), ConvGeometry((3, 3)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_scalar_chain_rule(self):
        x, w, g = np.array([[[2.0]]]), np.array([[[[3.0]]]]), np.array([[[5.0]]])
        dx, dw, db = conv_backward(x, w, g, ConvGeometry((1, 1)))
        assert dx.item() == 15.0 and dw.item() == 10.0 and db.item() == 5.0

    def test_grad_out_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            conv_backward(np.zeros((5, 5, 1)), np.zeros((3, 3, 1, 2)), np.zeros((4, 4, 2)), ConvGeometry((3, 3)))

    CASES = [
        ((5, 5, 2), (3, 3), 1, SAME),
        ((6, 5, 1), (4, 4), 1, SAME),
        ((7, 7, 2), (3, 3), 2, SAME),
        ((7, 6, 2), (2, 2), 2, VALID),
        ((4, 5, 5, 1), (2, 3, 3), 1, SAME),
        ((5, 4, 4, 2), (2, 2, 2), (2, 1, 2), (SAME, VALID, SAME)),
        ((3, 4, 4, 1), (4, 4, 4), 1, SAME),
    ]

    @pytest.mark.parametrize("instance", range(21))
    def test_finite_differences(self, kernel_backend, instance):
        shape, kernel, stride, mode = self.CASES[instance % len(self.CASES)]
        r = np.random.default_rng(1000 + instance)
        x = r.standard_normal(shape)
        w = r.standard_normal(kernel + (shape[-1], 3))
        b = r.standard_normal(3)
        geom = ConvGeometry(kernel, stride, mode)
        proj = r.standard_normal(conv_forward(x, w, b, geom).shape)

        def loss():
            return float(np.sum(conv_forward(x, w, b, geom) * proj))

        dx, dw, db = conv_backward(x, w, proj, geom)
        for analytic, arr in ((dx, x), (dw, w), (db, b)):
            assert relative_error(analytic, numerical_gradient(loss, arr)) < 1e-6


class TestMaxPool:
    @pytest.mark.parametrize(
        "shape,window,stride,modes",
        [
            ((5, 5, 2), (2, 2), (2, 2), (SAME, SAME)),
            ((5, 5, 2), (2, 2), (2, 2), (VALID, VALID)),
            ((7, 6, 1), (3, 2), (2, 2), (SAME, VALID)),
            ((5, 7, 7, 2), (2, 2, 2), (2, 2, 2), (SAME, SAME, SAME)),
            ((5, 13, 13, 1), (2, 2, 2), (2, 2, 2), (SAME, VALID, VALID)),
        ],
    )
    def test_matches_loop_oracle(self, rng, kernel_backend, shape, window, stride, modes):
        x = rng.standard_normal(shape)
        y, arg = maxpool_forward(x, window, stride, modes)
        ey, earg = maxpool_loop(x, window, stride, modes)
        np.testing.assert_array_equal(y, ey)
        np.testing.assert_array_equal(arg, earg)

    def test_cnn3d_pool2_shape(self):
        y, _ = maxpool_forward(np.zeros((5, 13, 13, 64)), (2, 2, 2), (2, 2, 2), (SAME, VALID, VALID))
        assert y.shape == (3, 6, 6, 64)

    def test_constant_input_first_index(self):
        y, arg = maxpool_forward(np.full((4, 4, 3), 2.5), (2, 2), (2, 2), VALID)
        assert (y == 2.5).all() and (arg == 0).all()

    @pytest.mark.parametrize("instance", range(20))
    def test_backward_routes_to_one_input(self, kernel_backend, instance):
        r = np.random.default_rng(instance)
        nd = 2 + instance % 2
        shape = tuple(r.integers(2, 7, size=nd)) + (2,)
        mode = SAME if instance % 3 else VALID
        x = r.standard_normal(shape)
        y, arg = maxpool_forward(x, (2,) * nd, None, mode)
        g = r.standard_normal(y.shape)
        dx = maxpool_backward(g, arg, x.shape, (2,) * nd, None, mode)
        assert np.isclose(dx.sum(), g.sum(), rtol=0, atol=1e-12)
        assert np.count_nonzero(dx) == np.count_nonzero(g)

        def loss():
            return float(np.sum(maxpool_forward(x, (2,) * nd, None, mode)[0] * g))

        assert relative_error(dx, numerical_gradient(loss, x)) < 1e-6


class TestElementwise:
    def test_values(self):
        assert sigmoid(np.array(0.0)) == 0.5
        assert tanh(np.array(0.0)) == 0.0
        np.testing.assert_array_equal(hadamard([1, 2, 3], [4, 5, 6]), [4, 10, 18])
        np.testing.assert_array_equal(add([1, 2], [3, 4]), [4, 6])
        np.testing.assert_array_equal(scale([1, -2], 3), [3, -6])

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(np.array([-1000.0, 1000.0, -40.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0
        np.testing.assert_allclose(out[2], 1 / (1 + np.exp(40.0)), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hadamard(np.ones(3), np.ones(4))
        with pytest.raises(DimensionError):
            add(np.ones((2, 2)), np.ones(2))

    def test_check_finite(self):
        with pytest.raises(NumericError):
            check_finite(np.array([1.0, np.nan]))
