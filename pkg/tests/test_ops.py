"""Forward-value checks for the numeric primitives."""

import math

import mpmath
import numpy as np
import pytest

from cpmamba.errors import ConfigError, NumericError, ShapeError
from cpmamba.numerics import Tensor, ops, stream


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestUnary:
    def test_silu_at_zero(self):
        assert ops.apply_unary(t(0.0), "silu").item() == 0.0

    def test_softplus_at_zero(self):
        assert ops.apply_unary(t(0.0), "softplus").item() == pytest.approx(math.log(2), abs=1e-12)

    def test_sigmoid_large_negative_matches_mpmath(self):
        got = ops.apply_unary(t(-100.0), "sigmoid").item()
        ref = float(1 / (1 + mpmath.e**100))
        assert 0.0 < got < 1e-8
        assert got == pytest.approx(ref, rel=1e-12)

    def test_sigmoid_large_positive_finite(self):
        got = ops.sigmoid(t(1000.0)).item()
        assert got == 1.0  # saturates without overflow

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            ops.apply_unary(t(1.0), "tanh")

    def test_softplus_matches_reference_on_grid(self):
        xs = np.linspace(-30, 30, 61)
        got = ops.softplus(t(xs)).data
        with mpmath.workdps(50):
            ref = np.array([float(mpmath.log(1 + mpmath.exp(v))) for v in xs])
        np.testing.assert_allclose(got, ref, rtol=1e-13)


class TestMatmulLinear:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = ops.matmul(t(np.eye(3)), t(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_product(self):
        out = ops.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_batched_broadcast(self):
        rng = stream(3, 0)
        a = rng.standard_normal((5, 2, 3))
        b = rng.standard_normal((3, 4))
        out = ops.matmul(t(a), t(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-15)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 2))))

    def test_linear_identity_and_constant(self):
        x = stream(0, 1).standard_normal((4, 3))
        out = ops.linear(t(x), t(np.eye(3)), t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)
        out = ops.linear(t(x), t(np.zeros((3, 2))), t([5.0, -1.0]))
        np.testing.assert_array_equal(out.data, np.tile([5.0, -1.0], (4, 1)))

    def test_linear_against_loop(self):
        rng = stream(0, 2)
        x = rng.standard_normal((2, 5, 3))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        out = ops.linear(t(x), t(w), t(b)).data
        for i in range(2):
            for j in range(5):
                for k in range(4):
                    want = sum(x[i, j, m] * w[m, k] for m in range(3)) + b[k]
                    assert out[i, j, k] == pytest.approx(want, rel=1e-12)


class TestConv2d:
    def test_delta_kernel_is_identity(self):
        x = stream(1, 0).standard_normal((2, 1, 5, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ops.conv2d_3x3(t(x), t(k), t(np.zeros(1)))
        np.testing.assert_allclose(out.data, x, atol=0)

    def test_ones_kernel_on_constant_interior(self):
        c = 2.5
        x = np.full((1, 1, 6, 6), c)
        out = ops.conv2d_3x3(t(x), t(np.ones((1, 1, 3, 3))), t(np.zeros(1))).data
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-15)
        # border sees the zero padding
        assert out[0, 0, 0, 0] == pytest.approx(4 * c)

    def test_matches_explicit_loop(self):
        rng = stream(1, 1)
        x = rng.standard_normal((2, 3, 4, 5))
        k = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        out = ops.conv2d_3x3(t(x), t(k), t(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for bi in range(2):
            for o in range(2):
                for i in range(4):
                    for j in range(5):
                        want = b[o] + np.sum(k[o] * xp[bi, :, i : i + 3, j : j + 3])
                        assert out[bi, o, i, j] == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d_3x3(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), t(np.zeros(1)))


class TestCausalConv1d:
    def test_last_tap_identity(self):
        x = stream(2, 0).standard_normal((2, 6, 3))
        k = np.zeros((3, 4))
        k[:, -1] = 1.0
        out = ops.causal_conv1d(t(x), t(k))
        np.testing.assert_array_equal(out.data, x)

    def test_first_tap_is_delay(self):
        x = stream(2, 1).standard_normal((1, 6, 2))
        d = 4
        k = np.zeros((2, d))
        k[:, 0] = 1.0
        out = ops.causal_conv1d(t(x), t(k)).data
        np.testing.assert_array_equal(out[:, : d - 1, :], 0.0)
        np.testing.assert_array_equal(out[:, d - 1 :, :], x[:, : 6 - d + 1, :])

    def test_causality_probe(self):
        rng = stream(2, 2)
        x = rng.standard_normal((1, 8, 2))
        k = rng.standard_normal((2, 3))
        base = ops.causal_conv1d(t(x), t(k)).data
        for tpos in range(8):
            xx = x.copy()
            xx[0, tpos, :] += 1.0
            pert = ops.causal_conv1d(t(xx), t(k)).data
            np.testing.assert_array_equal(pert[:, :tpos, :], base[:, :tpos, :])

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            ops.causal_conv1d(t(np.zeros((1, 4, 2))), t(np.zeros((2, 0))))


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = np.full((3, 4), 7.0)
        out = ops.layer_norm(t(x), t(np.ones(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = ops.layer_norm(t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-3)

    def test_mean_var_invariant(self):
        x = stream(4, 0).standard_normal((6, 16))
        out = ops.layer_norm(t(x), t(np.ones(16)), t(np.zeros(16))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


class TestPooling:
    def test_constant_channel(self):
        x = np.full((1, 2, 3, 3), 4.0)
        for kind in ("avg", "max"):
            out = ops.pool_global(t(x), kind)
            assert out.shape == (1, 2, 1, 1)
            np.testing.assert_allclose(out.data, 4.0)

    def test_known_values(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert ops.pool_global(t(x), "avg").item() == pytest.approx(2.5)
        assert ops.pool_global(t(x), "max").item() == pytest.approx(4.0)

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            ops.pool_global(t(np.zeros((1, 1, 2, 2))), "median")


class TestDropout:
    def test_eval_mode_is_bit_exact_passthrough(self):
        x = t(stream(5, 0).standard_normal((10, 10)))
        out = ops.dropout(x, 0.5, training=False, rng=stream(5, 1))
        assert out is x

    def test_p_zero_passthrough(self):
        x = t(stream(5, 2).standard_normal((10, 10)))
        out = ops.dropout(x, 0.0, training=True, rng=stream(5, 3))
        assert out is x

    def test_drop_fraction(self):
        x = t(np.ones((400, 250)))
        out = ops.dropout(x, 0.1, training=True, rng=stream(5, 4))
        frac = np.mean(out.data == 0.0)
        assert abs(frac - 0.1) < 0.01
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.9, rtol=1e-12)

    def test_p_one_rejected(self):
        with pytest.raises(ConfigError):
            ops.dropout(t(np.ones(3)), 1.0, training=True, rng=stream(5, 5))


class TestDomainGuards:
    def test_div_by_zero(self):
        with pytest.raises(NumericError):
            ops.div(t([1.0]), t([0.0]))

    def test_log_nonpositive(self):
        with pytest.raises(NumericError):
            ops.log(t([0.0]))
        with pytest.raises(NumericError):
            ops.log(t([-1.0]))

    def test_sqrt_negative(self):
        with pytest.raises(NumericError):
            ops.sqrt(t([-1.0]))

    def test_exp_overflow(self):
        with pytest.raises(NumericError):
            ops.exp(t([1e4]))


class TestShapeOps:
    def test_select_and_stack_roundtrip(self):
        x = stream(6, 0).standard_normal((2, 5, 3))
        parts = [ops.select(t(x), i, axis=1) for i in range(5)]
        back = ops.stack(parts, axis=1)
        np.testing.assert_array_equal(back.data, x)

    def test_pad_slice_roundtrip(self):
        x = stream(6, 1).standard_normal((2, 5, 3))
        padded = ops.pad_axis(t(x), 1, 3)
        assert padded.shape == (2, 8, 3)
        np.testing.assert_array_equal(padded.data[:, 5:, :], 0.0)
        back = ops.slice_axis(padded, 1, 0, 5)
        np.testing.assert_array_equal(back.data, x)

    def test_where_mask(self):
        mask = np.array([True, False, True])
        out = ops.where_mask(mask, t([1.0, 1.0, 1.0]), t([2.0, 2.0, 2.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 1.0])

    def test_softmax_rows_sum_to_one(self):
        x = stream(6, 2).standard_normal((4, 7)) * 30
        out = ops.softmax_last(t(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
        assert (out > 0).all()
