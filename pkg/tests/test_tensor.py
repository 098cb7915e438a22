import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soundnet.tensor import (
    BatchNormParams,
    ConvParams,
    InputTooShortError,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    conv_output_length,
    kl_divergence,
    kl_softmax_gradient,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_backward,
    relu_forward,
    softmax,
    transposed_conv1d_backward,
    transposed_conv1d_forward,
)

from conftest import numeric_grad, rel_error


def naive_conv(x, w, b, stride, pad):
    """Brute-force sliding dot product, used as an independent oracle."""
    batch, cin, length = x.shape
    cout, _, k = w.shape
    xp = np.zeros((batch, cin, length + 2 * pad))
    xp[:, :, pad:pad + length] = x
    n = (length + 2 * pad - k) // stride + 1
    out = np.zeros((batch, cout, n))
    for bi in range(batch):
        for o in range(cout):
            for t in range(n):
                out[bi, o, t] = b[o] + sum(
                    w[o, c, j] * xp[bi, c, t * stride + j] for c in range(cin) for j in range(k)
                )
    return out


def conv(w, b=None, stride=1, padding=0):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, None, :]
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return ConvParams(w, b, stride, padding)


class TestConv1d:
    def test_identity_like_kernel(self):
        x = np.arange(8, dtype=np.float64)[None, None, :]
        out = conv1d_forward(x, conv([1, 0, 0]))
        np.testing.assert_array_equal(out[0, 0], np.arange(6))

    def test_strided_pair_sum(self):
        x = np.array([[[1.0, 2, 3, 4]]])
        out = conv1d_forward(x, conv([1, 1], stride=2))
        np.testing.assert_array_equal(out[0, 0], [3, 7])

    def test_table1_conv1_length(self):
        # floor((220050 + 64 - 64) / 2) + 1
        assert conv_output_length(220_050, 64, 2, 32) == 110_026

    def test_matches_bruteforce(self, rng):
        for stride, pad in [(1, 0), (2, 1), (3, 2)]:
            x = rng.normal(size=(2, 3, 11))
            w = rng.normal(size=(4, 3, 3))
            b = rng.normal(size=4)
            out = conv1d_forward(x, ConvParams(w, b, stride, pad))
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channels"):
            conv1d_forward(np.zeros((1, 2, 10)), conv(np.zeros((1, 3, 2))))

    def test_too_short_reports_minimum(self):
        with pytest.raises(InputTooShortError) as exc:
            conv1d_forward(np.zeros((1, 1, 3)), conv(np.zeros(5)))
        assert exc.value.min_length == 5

    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(2, 2, 9))
        p = ConvParams(rng.normal(size=(3, 2, 3)), np.zeros(3), 2, 1)
        gx, gw, gb = conv1d_backward(x, p, np.zeros_like(conv1d_forward(x, p)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_unit_kernel_passes_gradient_through(self, rng):
        x = rng.normal(size=(1, 1, 7))
        g = rng.normal(size=(1, 1, 7))
        gx, _, _ = conv1d_backward(x, conv([1.0]), g)
        np.testing.assert_array_equal(gx, g)

    def test_grad_shape_mismatch(self):
        with pytest.raises(ShapeError):
            conv1d_backward(np.zeros((1, 1, 5)), conv([1.0, 1.0]), np.zeros((1, 1, 5)))

    def test_finite_differences(self, rng):
        x = rng.normal(size=(2, 2, 10))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=3)
        proj = rng.normal(size=conv1d_forward(x, ConvParams(w, b, 2, 1)).shape)

        def loss():
            return float((conv1d_forward(x, ConvParams(w, b, 2, 1)) * proj).sum())

        gx, gw, gb = conv1d_backward(x, ConvParams(w, b, 2, 1), proj)
        assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
        assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
        assert rel_error(gb, numeric_grad(loss, b)) < 1e-4

    def test_float32_stays_float32(self, rng):
        x = rng.normal(size=(1, 1, 20)).astype(np.float32)
        p = ConvParams(rng.normal(size=(2, 1, 3)).astype(np.float32), np.zeros(2, np.float32))
        assert conv1d_forward(x, p).dtype == np.float32


class TestTransposedConv:
    def test_hand_expansion(self):
        out = transposed_conv1d_forward(np.array([[[1.0]]]), conv([1, 1, 1], stride=2))
        np.testing.assert_array_equal(out, [[[1, 1, 1]]])

    def test_zero_input(self, rng):
        p = ConvParams(rng.normal(size=(2, 3, 4)), np.zeros(3), 2, 1)
        assert not transposed_conv1d_forward(np.zeros((1, 2, 5)), p).any()

    def test_adjoint_length6(self, rng):
        w = rng.normal(size=(1, 1, 3))
        p = ConvParams(w, np.zeros(1), 1, 0)
        x = rng.normal(size=(1, 1, 6))
        y = rng.normal(size=(1, 1, 4))
        lhs = (conv1d_forward(x, p) * y).sum()
        rhs = (x * transposed_conv1d_forward(y, p)).sum()
        assert abs(lhs - rhs) < 1e-6

    def test_output_length_formula(self):
        p = conv(np.zeros(5), stride=3, padding=1)
        out = transposed_conv1d_forward(np.zeros((1, 1, 4)), p)
        assert out.shape[2] == (4 - 1) * 3 - 2 + 5

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            transposed_conv1d_forward(np.zeros((1, 1, 1)), conv(np.zeros(2), padding=1))

    def test_finite_differences(self, rng):
        x = rng.normal(size=(2, 3, 5))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=2)
        p = lambda: ConvParams(w, b, 2, 1)
        proj = rng.normal(size=transposed_conv1d_forward(x, p()).shape)

        def loss():
            return float((transposed_conv1d_forward(x, p()) * proj).sum())

        gx, gw, gb = transposed_conv1d_backward(x, p(), proj)
        assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
        assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
        assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


class TestMaxPool:
    def test_hand_case(self):
        out, _ = maxpool1d_forward(np.array([[[1.0, 3, 2, 5]]]), 2, 2)
        np.testing.assert_array_equal(out, [[[3, 5]]])

    def test_ties_route_to_first(self):
        x = np.ones((1, 1, 6))
        out, idx = maxpool1d_forward(x, 3, 3)
        np.testing.assert_array_equal(out, np.ones((1, 1, 2)))
        g = maxpool1d_backward(np.array([[[2.0, 5.0]]]), idx, 6)
        np.testing.assert_array_equal(g, [[[2, 0, 0, 5, 0, 0]]])

    def test_default_stride_is_pool_size(self):
        out, _ = maxpool1d_forward(np.zeros((1, 1, 16)), 8)
        assert out.shape[2] == 2

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            maxpool1d_forward(np.zeros((1, 1, 3)), 4)

    def test_finite_differences_overlapping(self, rng):
        # distinct values spaced well beyond the step so no window has a near-tie
        x = rng.permutation(24).astype(np.float64).reshape(2, 1, 12) * 0.1
        proj = rng.normal(size=maxpool1d_forward(x, 3, 2)[0].shape)

        def loss():
            return float((maxpool1d_forward(x, 3, 2)[0] * proj).sum())

        _, idx = maxpool1d_forward(x, 3, 2)
        g = maxpool1d_backward(proj, idx, 12)
        assert rel_error(g, numeric_grad(loss, x)) < 1e-4


class TestBatchNorm:
    def params(self, c, rng=None):
        if rng is None:
            return BatchNormParams(np.ones(c), np.zeros(c))
        return BatchNormParams(rng.normal(size=c), rng.normal(size=c))

    def test_constant_input_is_zero(self):
        out, _, _ = batchnorm_forward(np.full((2, 3, 4), 7.0), self.params(3))
        np.testing.assert_array_equal(out, 0)

    def test_normalized_moments(self, rng):
        x = rng.normal(3, 5, size=(4, 2, 9))
        out, _, _ = batchnorm_forward(x, self.params(2))
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-5)

    def test_running_stats_update(self, rng):
        x = rng.normal(size=(2, 2, 5))
        p = BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
        _, p2, _ = batchnorm_forward(x, p)
        np.testing.assert_allclose(p2.running_mean, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(p2.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)))
        # input params untouched
        np.testing.assert_array_equal(p.running_mean, 0)

    def test_eval_requires_stats(self):
        with pytest.raises(ValueError, match="running"):
            batchnorm_forward(np.zeros((1, 2, 3)), self.params(2), "eval")

    def test_eval_uses_running_stats(self):
        p = BatchNormParams(np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), epsilon=0.0)
        out, _, _ = batchnorm_forward(np.array([[[3.0, 5.0]]]), p, "eval")
        np.testing.assert_allclose(out, [[[1.0, 2.0]]])

    def test_train_needs_two_values(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((1, 1, 1)), self.params(1))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_finite_differences(self, rng, mode):
        x = rng.normal(size=(2, 3, 5))
        p = self.params(3, rng)
        p = BatchNormParams(p.gamma, p.beta, rng.normal(size=3), rng.uniform(0.5, 2, size=3))
        proj = rng.normal(size=x.shape)

        def loss():
            return float((batchnorm_forward(x, p, mode)[0] * proj).sum())

        _, _, cache = batchnorm_forward(x, p, mode)
        gx, gg, gb = batchnorm_backward(proj, cache)
        assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
        assert rel_error(gg, numeric_grad(loss, p.gamma)) < 1e-4
        assert rel_error(gb, numeric_grad(loss, p.beta)) < 1e-4


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0, 2])), [0, 0, 2])

    def test_gradient_zero_at_zero(self):
        g = relu_backward(np.array([-1.0, 0, 2]), np.ones(3))
        np.testing.assert_array_equal(g, [0, 0, 1])

    def test_idempotent(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(relu_forward(relu_forward(x)), relu_forward(x))


class TestSoftmaxKL:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_no_overflow(self):
        np.testing.assert_allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(np.array([0.0, math.log(3)])), [0.25, 0.75])

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    def test_kl_zero_on_equal(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == pytest.approx(0, abs=1e-15)

    def test_kl_closed_forms(self):
        assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected)
        assert expected == pytest.approx(0.1438, abs=1e-4)

    def test_kl_length_mismatch(self):
        with pytest.raises(ShapeError):
            kl_divergence([1.0], [0.5, 0.5])

    def test_kl_floor_prevents_infinity(self):
        assert math.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))

    def test_gradient_closed_form(self):
        np.testing.assert_allclose(kl_softmax_gradient([1, 0], [0.0, 0.0]), [-0.5, 0.5])

    def test_gradient_zero_at_match(self, rng):
        z = rng.normal(size=7)
        np.testing.assert_allclose(kl_softmax_gradient(softmax(z), z), 0, atol=1e-15)

    def test_gradient_finite_differences(self, rng):
        z = rng.normal(size=10)
        p = softmax(rng.normal(size=10))

        def loss():
            return kl_divergence(p, softmax(z))

        num = numeric_grad(loss, z, h=1e-5)
        assert np.abs(kl_softmax_gradient(p, z) - num).max() < 1e-6

    def test_gradient_with_floored_class(self):
        # class 2 has probability ~1e-9, below the floor, yet carries teacher mass
        z = np.array([0.0, 1.0, -21.0])
        p = np.array([0.3, 0.3, 0.4])
        assert softmax(z)[2] < 1e-8

        def loss():
            return kl_divergence(p, softmax(z))

        num = numeric_grad(loss, z, h=1e-6)
        assert np.abs(kl_softmax_gradient(p, z) - num).max() < 1e-6
        assert abs(kl_softmax_gradient(p, z).sum()) < 1e-12


# ---------------------------------------------------------------- properties

geom = st.tuples(
    st.integers(1, 60),  # length
    st.integers(1, 9),  # kernel
    st.integers(1, 4),  # stride
    st.integers(0, 4),  # padding
)


@settings(max_examples=60, deadline=None)
@given(geom)
def test_conv_shape_law(g):
    length, k, s, p = g
    x = np.ones((1, 1, length))
    expected = math.floor((length + 2 * p - k) / s) + 1
    if expected < 1:
        with pytest.raises(InputTooShortError):
            conv1d_forward(x, conv(np.ones(k), stride=s, padding=p))
    else:
        assert conv1d_forward(x, conv(np.ones(k), stride=s, padding=p)).shape[2] == expected


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 9), st.integers(1, 4))
def test_pool_shape_law(length, k, s):
    expected = math.floor((length - k) / s) + 1
    if length < k:
        with pytest.raises(InputTooShortError):
            maxpool1d_forward(np.ones((1, 1, length)), k, s)
    else:
        assert maxpool1d_forward(np.ones((1, 1, length)), k, s)[0].shape[2] == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2), st.integers(0, 10**6))
def test_adjoint_identity(length, k, s, p, seed):
    rng = np.random.default_rng(seed)
    n_in = (length - 1) * s + k - 2 * p  # conv input length that the transposed op reproduces
    if n_in < 1 or (n_in + 2 * p - k) // s + 1 != length:
        return
    w = rng.normal(size=(2, 3, k))
    x = rng.normal(size=(2, 3, n_in))
    y = rng.normal(size=(2, 2, length))
    lhs = (conv1d_forward(x, ConvParams(w, np.zeros(2), s, p)) * y).sum()
    rhs = (x * transposed_conv1d_forward(y, ConvParams(w, np.zeros(3), s, p))).sum()
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 10**6))
def test_translation_equivariance(k, s, seed):
    rng = np.random.default_rng(seed)
    params = ConvParams(rng.normal(size=(2, 1, k)), rng.normal(size=2), s, 0)
    x = rng.normal(size=(1, 1, 40))
    a = conv1d_forward(x[:, :, s:], params)
    b = conv1d_forward(x, params)
    n = a.shape[2]
    np.testing.assert_allclose(a, b[:, :, 1:n + 1], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.integers(0, 10**6))
def test_kl_properties(logits, seed):
    z = np.array(logits)
    q = softmax(z)
    p = softmax(np.random.default_rng(seed).normal(size=z.size))
    assert kl_divergence(p, q) >= 0
    assert kl_divergence(p, p) == pytest.approx(0, abs=1e-12)
    assert abs(kl_softmax_gradient(p, z).sum()) < 1e-9
    assert np.all((q >= 0) & (q <= 1)) and abs(q.sum() - 1) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_kernels_stay_finite(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=1e3, size=(2, 2, 16))
    out = conv1d_forward(x, ConvParams(rng.normal(size=(3, 2, 4)), np.zeros(3), 2, 1))
    out, _, _ = batchnorm_forward(out, BatchNormParams(np.ones(3), np.zeros(3)))
    out, _ = maxpool1d_forward(relu_forward(out), 2)
    assert np.isfinite(out).all()
    assert np.isfinite(softmax(rng.normal(scale=1e4, size=30))).all()
