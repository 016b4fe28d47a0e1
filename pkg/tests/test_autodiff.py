"""Tensor engine tests: op semantics, oracles, and finite-difference checks."""

import numpy as np
import pytest

from sppvideo import autodiff as ad
from sppvideo.autodiff import Tensor, backward
from sppvideo.errors import ConfigurationError, NumericError, UsageError

from gradcheck import assert_grads_close

RNG = np.random.default_rng(1234)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def randt(*shape, requires_grad=True):
    return Tensor(RNG.standard_normal(shape), requires_grad=requires_grad)


class TestBasics:
    def test_shape_invariant(self):
        x = t64([[1.0, 2.0], [3.0, 4.0]])
        assert x.shape == (2, 2)
        assert x.size == 4

    def test_nan_raises_on_construction(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])

    def test_nan_raises_in_op(self):
        x = t64([-1.0])
        with pytest.raises(NumericError):
            ad.sqrt(x)

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.ones(3, dtype=np.float64))
        with pytest.raises(ConfigurationError):
            ad.add(a, b)

    def test_backward_non_scalar_rejected(self):
        x = randt(3)
        with pytest.raises(UsageError):
            backward(x * x)

    def test_sum_of_squares_grad(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_detached_loss_leaves_grads_untouched(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = ad.tsum(x * x).detach()
        backward(loss)
        assert x.grad is None

    def test_repeated_backward_accumulates(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = ad.tsum(x * x)
        backward(loss)
        backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_determinism(self):
        a = RNG.standard_normal((4, 4))
        b = RNG.standard_normal((4, 4))
        r1 = ad.matmul(Tensor(a), Tensor(b)).data
        r2 = ad.matmul(Tensor(a), Tensor(b)).data
        assert np.array_equal(r1, r2)


class TestGradChecks:
    """Every differentiable op passes central finite differences (f64)."""

    def test_elementwise_binary(self):
        a, b = randt(3, 4), randt(3, 4)
        assert_grads_close(lambda: ad.tsum(ad.mul(ad.add(a, b), ad.sub(a, b))), [a, b])

    def test_div(self):
        a, b = randt(3, 3), Tensor(RNG.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        assert_grads_close(lambda: ad.tsum(ad.div(a, b)), [a, b])

    def test_broadcasting(self):
        a = randt(2, 3, 4)
        b = randt(3, 1)
        assert_grads_close(lambda: ad.tsum(ad.mul(a, b)), [a, b])

    @pytest.mark.parametrize("op", [ad.absval, ad.exp, ad.sqrt, ad.sigmoid,
                                    ad.tanh, ad.gelu, ad.sine, ad.cosine, ad.relu])
    def test_unary(self, op):
        x = Tensor(RNG.uniform(0.2, 1.5, (4, 5)), requires_grad=True)
        assert_grads_close(lambda: ad.tsum(op(x)), [x])

    def test_powc(self):
        x = Tensor(RNG.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        assert_grads_close(lambda: ad.tsum(ad.powc(x, 1.7)), [x])

    def test_matmul_2d(self):
        a, b = randt(3, 4), randt(4, 2)
        assert_grads_close(lambda: ad.tsum(ad.matmul(a, b)), [a, b])

    def test_matmul_1d_2d(self):
        a, b = randt(4), randt(4, 2)
        assert_grads_close(lambda: ad.tsum(ad.matmul(a, b)), [a, b])

    def test_reshape_slice_concat(self):
        a, b = randt(2, 6), randt(2, 6)

        def fn():
            c = ad.concat([ad.reshape(a, (2, 2, 3)), ad.reshape(b, (2, 2, 3))], axis=1)
            return ad.tsum(ad.mul(c[:, 1:3, ::2], c[:, 0:2, 1::2]))

        assert_grads_close(fn, [a, b])

    def test_strided_slice(self):
        a = randt(3, 8, 8)
        assert_grads_close(lambda: ad.tsum(ad.mul(a[:, 1::2, 0::2], a[:, 0::2, 1::2])), [a])

    def test_pad2d(self):
        a = randt(2, 3, 3)
        assert_grads_close(lambda: ad.tsum(ad.mul(ad.pad2d(a, (1, 2, 0, 1)),
                                                  ad.pad2d(a, (1, 2, 0, 1)))), [a])

    def test_mean_axis(self):
        a = randt(2, 3, 4)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.tmean(a, axis=(1, 2)), 2.0)), [a])

    def test_sum_keepdims(self):
        a = randt(2, 3)
        assert_grads_close(lambda: ad.tsum(ad.mul(a, ad.tsum(a, axis=1, keepdims=True))), [a])

    def test_conv2d(self):
        x, w = randt(2, 3, 5, 5), randt(4, 3, 3, 3)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.conv2d(x, w, stride=2, padding=1), 2.0)),
                           [x, w])

    def test_depthwise_conv2d(self):
        x, w = randt(2, 3, 6, 6), randt(3, 3, 3)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.depthwise_conv2d(x, w, padding=1), 2.0)),
                           [x, w])

    def test_pixel_shuffle(self):
        x = randt(1, 8, 3, 3)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.pixel_shuffle_upsample(x, 2), 2.0)), [x])

    def test_nearest_upsample(self):
        x = randt(1, 2, 3, 3)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.nearest_upsample(x, 2), 2.0)), [x])

    def test_avg_pool(self):
        x = randt(1, 2, 5, 6)
        assert_grads_close(lambda: ad.tsum(ad.powc(ad.avg_pool2d(x, 2), 2.0)), [x])

    def test_layer_norm_channels(self):
        x = randt(2, 4, 3, 3)
        gamma = Tensor(RNG.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = randt(4)
        assert_grads_close(
            lambda: ad.tsum(ad.powc(ad.layer_norm_channels(x, gamma, beta), 2.0)),
            [x, gamma, beta], rtol=5e-4)


class TestConv2d:
    def test_scalar_product(self):
        out = ad.conv2d(t64([[[[2.0]]]]), t64([[[[3.0]]]]), 1, 0)
        np.testing.assert_allclose(out.data, [[[[6.0]]]])

    def test_sum_of_ones(self):
        out = ad.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), 1, 0)
        np.testing.assert_allclose(out.data, [[[[9.0]]]])

    def test_output_shape(self):
        out = ad.conv2d(randt(1, 2, 7, 9, requires_grad=False),
                        randt(3, 2, 3, 3, requires_grad=False), stride=2, padding=1)
        assert out.shape == (1, 3, 4, 5)

    def test_against_loop_oracle(self):
        x = RNG.standard_normal((1, 2, 5, 5))
        w = RNG.standard_normal((3, 2, 3, 3))
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            got = ad.conv2d(Tensor(x), Tensor(w), stride, padding).data
            want = _conv_loop_oracle(x, w, stride, padding)
            assert np.abs(got - want).max() < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            ad.conv2d(randt(1, 2, 4, 4), randt(1, 3, 3, 3))

    def test_kernel_too_large(self):
        with pytest.raises(ConfigurationError):
            ad.conv2d(randt(1, 1, 2, 2), randt(1, 1, 5, 5))


def _conv_loop_oracle(x, w, stride, padding):
    """Direct quadruple-loop convolution; deliberately naive."""
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wid + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wid] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, yi * stride + i, xi * stride + j] * \
                                    w[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc
    return out


class TestPixelShuffle:
    def test_definitional_layout(self):
        x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = ad.pixel_shuffle_upsample(x, 2)
        np.testing.assert_allclose(out.data, [[[[1.0, 2.0], [3.0, 4.0]]]])

    def test_s1_identity(self):
        x = randt(1, 3, 2, 2, requires_grad=False)
        np.testing.assert_array_equal(ad.pixel_shuffle_upsample(x, 1).data, x.data)

    def test_roundtrip_with_unshuffle(self):
        x = Tensor(RNG.standard_normal((1, 1, 4, 4)))
        back = ad.pixel_shuffle_upsample(ad.pixel_unshuffle(x, 2), 2)
        assert np.array_equal(back.data, x.data)

    def test_roundtrip_other_direction(self):
        x = Tensor(RNG.standard_normal((2, 8, 3, 5)))
        back = ad.pixel_unshuffle(ad.pixel_shuffle_upsample(x, 2), 2)
        assert np.array_equal(back.data, x.data)

    def test_non_divisible_channels(self):
        with pytest.raises(ConfigurationError):
            ad.pixel_shuffle_upsample(randt(1, 3, 2, 2), 2)
