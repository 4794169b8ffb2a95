import numpy as np
import pytest

from evc.errors import NonFiniteError, ShapeError, ValidationError
from evc.tensor import (
    ConvParams,
    Tape,
    Tensor,
    channel_scale,
    conv2d,
    finite_diff_check,
    leaky_relu,
    parameter,
    space_to_depth,
    square,
    subpixel_upsample,
    tsum,
)


def _conv_reference(x, w, b, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, c, r * stride + u, s * stride + v] * w[o, c, u, v]
                    out[i, o, r, s] = acc
    return out


def _params(rng, c_in, c_out, k, stride=1, padding=0, groups=1):
    w = parameter(rng.standard_normal((c_out, c_in // groups, k, k)))
    b = parameter(rng.standard_normal(c_out))
    return ConvParams(w, b, stride=stride, padding=padding, groups=groups)


class TestConv2d:
    def test_all_ones_sum(self):
        p = ConvParams(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), p)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 4))
        p = ConvParams(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(conv2d(Tensor(x), p).data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_reference(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 7, 6))
        p = _params(rng, 3, 4, 3, stride, padding)
        out = conv2d(Tensor(x), p).data
        ref = _conv_reference(x, p.weight.data, p.bias.data, stride, padding)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-10)

    def test_output_size(self, rng):
        p = _params(rng, 2, 2, 3, stride=2, padding=1)
        assert conv2d(Tensor(rng.standard_normal((1, 2, 9, 8))), p).shape == (1, 2, 5, 4)

    def test_channel_mismatch(self, rng):
        p = _params(rng, 3, 2, 3)
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(rng.standard_normal((1, 2, 5, 5))), p)

    def test_groups_must_divide(self, rng):
        with pytest.raises(ShapeError):
            ConvParams(Tensor(np.ones((3, 1, 3, 3))), Tensor(np.zeros(3)), groups=2)


class TestConvBackward:
    def test_identity_kernel_input_grad_is_ones(self, rng):
        x = parameter(rng.standard_normal((1, 2, 4, 4)))
        p = ConvParams(Tensor(np.eye(2)[:, :, None, None]), Tensor(np.zeros(2)))
        with Tape() as tape:
            loss = tsum(conv2d(x, p))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_zero_grad_out(self, rng):
        x = parameter(rng.standard_normal((1, 2, 5, 5)))
        p = _params(rng, 2, 3, 3, padding=1)
        with Tape() as tape:
            out = conv2d(x, p)
        tape.backward(out, grad=np.zeros(out.shape))
        for t in (x, p.weight, p.bias):
            assert not np.any(t.grad)

    @pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 1, 4)])
    def test_finite_differences(self, rng, stride, padding, groups):
        x = parameter(rng.standard_normal((2, 4, 6, 6)))
        p = _params(rng, 4, 4, 3, stride, padding, groups)
        target = rng.standard_normal(conv2d(x, p).shape)

        def f():
            return tsum(square(conv2d(x, p) - Tensor(target)))

        for theta in (x, p.weight, p.bias):
            assert finite_diff_check(f, theta, h=1e-4) < 1e-4


class TestElementwise:
    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor(np.array([2.0, -1.0])), 0.01)
        np.testing.assert_allclose(out.data, [2.0, -0.01])

    def test_leaky_relu_positive_homogeneity(self, rng):
        x = rng.standard_normal(50)
        a = 3.7
        np.testing.assert_allclose(leaky_relu(Tensor(a * x)).data, a * leaky_relu(Tensor(x)).data)

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ValidationError):
            leaky_relu(Tensor(np.ones(3)), 1.5)

    def test_channel_scale_identity_and_zero(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        np.testing.assert_array_equal(channel_scale(x, Tensor(np.ones(3))).data, x.data)
        assert not np.any(channel_scale(x, Tensor(np.zeros(3))).data)

    def test_channel_scale_gradients(self, rng):
        x = parameter(rng.standard_normal((2, 3, 4, 4)))
        m = parameter(rng.uniform(0.0, 1.0, 3))

        def f():
            return tsum(square(channel_scale(x, m)))

        assert finite_diff_check(f, m) < 1e-4
        assert finite_diff_check(f, x) < 1e-4

    def test_channel_scale_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            channel_scale(Tensor(rng.standard_normal((1, 3, 2, 2))), Tensor(np.ones(2)))


class TestPixelShuffle:
    def test_shape(self):
        assert subpixel_upsample(Tensor(np.zeros((1, 4, 2, 2))), 2).shape == (1, 1, 4, 4)

    def test_bijection(self, rng):
        x = rng.standard_normal((2, 8, 3, 5))
        back = space_to_depth(subpixel_upsample(Tensor(x), 2), 2)
        np.testing.assert_array_equal(back.data, x)

    def test_constant_stays_constant(self):
        out = subpixel_upsample(Tensor(np.full((1, 8, 3, 3), 2.5)), 2)
        assert np.all(out.data == 2.5)

    def test_channel_order(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
        out = subpixel_upsample(Tensor(x), 2).data[0, 0]
        np.testing.assert_array_equal(out, [[0.0, 1.0], [2.0, 3.0]])

    def test_channels_must_divide(self):
        with pytest.raises(ShapeError, match="not divisible"):
            subpixel_upsample(Tensor(np.zeros((1, 6, 2, 2))), 2)

    def test_space_to_depth_gradient_is_shuffle(self, rng):
        x = parameter(rng.standard_normal((1, 2, 2, 4)))
        w = rng.standard_normal((1, 8, 1, 2))
        with Tape() as tape:
            loss = tsum(space_to_depth(x, 2) * Tensor(w))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, subpixel_upsample(Tensor(w), 2).data)


class TestTape:
    def test_no_tape_records_nothing(self):
        x = parameter(np.ones(3))
        y = x * 2.0
        assert y.is_leaf and not y.requires_grad

    def test_gradient_accumulates_over_uses(self):
        x = parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            loss = tsum(x * x + x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [3.0, 5.0])

    def test_non_finite_loss(self):
        x = parameter(np.array([np.inf]))
        with Tape() as tape:
            loss = tsum(x)
        with pytest.raises(NonFiniteError):
            tape.backward(loss)

    def test_mismatched_shapes_are_not_broadcast(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(2))


class TestFiniteDiffCheck:
    def test_half_squared_norm(self, rng):
        theta = parameter(rng.standard_normal(6))
        assert finite_diff_check(lambda: tsum(square(theta)) * 0.5, theta) < 1e-8

    def test_constant_function(self, rng):
        theta = parameter(rng.standard_normal(4))
        const = Tensor(np.array(3.0))
        assert finite_diff_check(lambda: const, theta) == 0.0

    def test_requires_float64(self):
        theta = parameter(np.ones(3, dtype=np.float32))
        with pytest.raises(ValidationError):
            finite_diff_check(lambda: tsum(theta), theta)
