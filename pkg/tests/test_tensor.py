"""Numerical core: convolution vs direct summation, softmax, normalization,
reverse-mode gradients against central finite differences, and Adam."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chromaprop.errors import ContractError, NumericError
from chromaprop.optim import OptimizerState, ParameterSet, adam_step
from chromaprop.tensor import (Tensor, absolute, add, avg_pool2x, backward,
                               channel_affine, check_gradients, concat, conv2d,
                               crop2d, div, instance_norm, l1_loss, mul, no_grad,
                               pad2d_replicate, relu, softmax, sqrt, sub,
                               take_channels, tensor_mean, tensor_sum, upsample2x)


def conv2d_oracle(x, w, b, stride=1, dilation=1, padding="zero"):
    """Direct quadruple-loop summation; the independent route conv2d must match."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    mode = "edge" if padding == "replicate" else "constant"
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode=mode)
    ho = (h + 2 * ph - (dilation * (kh - 1) + 1)) // stride + 1
    wo = (wd + 2 * pw - (dilation * (kw - 1) + 1)) // stride + 1
    out = np.zeros((n, ho, wo, cout), dtype=np.float64)
    for nn in range(n):
        for y in range(ho):
            for xx in range(wo):
                for co in range(cout):
                    acc = 0.0 if b is None else float(b[co])
                    for i in range(kh):
                        for j in range(kw):
                            for ci in range(cin):
                                acc += xp[nn, y * stride + i * dilation,
                                          xx * stride + j * dilation, ci] * w[i, j, ci, co]
                    out[nn, y, xx, co] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((1, 3, 3, 1)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weights_give_bias(self, rng):
        x = Tensor(rng.random((2, 4, 5, 3)).astype(np.float32))
        w = Tensor(np.zeros((3, 3, 3, 2), dtype=np.float32))
        b = Tensor(np.array([0.25, -1.5], dtype=np.float32))
        out = conv2d(x, w, b)
        assert np.allclose(out.data[..., 0], 0.25) and np.allclose(out.data[..., 1], -1.5)

    def test_dilated_random_case_vs_oracle(self, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, dilation=2, padding="zero")
        expected = conv2d_oracle(x, w, b, dilation=2, padding="zero")
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.random((1, 4, 4, 3)))
        w = Tensor(rng.random((3, 3, 2, 4)))
        with pytest.raises(ContractError):
            conv2d(x, w)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ContractError):
            conv2d(Tensor(rng.random((1, 4, 4, 1))), Tensor(rng.random((2, 2, 1, 1))))

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 2), h=st.integers(1, 9), w=st.integers(1, 9),
        cin=st.integers(1, 3), cout=st.integers(1, 3),
        k=st.sampled_from([1, 3]), stride=st.integers(1, 2),
        dilation=st.integers(1, 2), padding=st.sampled_from(["zero", "replicate"]),
        seed=st.integers(0, 2 ** 16),
    )
    def test_property_sweep_vs_oracle(self, n, h, w, cin, cout, k, stride, dilation, padding, seed):
        local = np.random.default_rng(seed)
        x = local.normal(size=(n, h, w, cin))
        wt = local.normal(size=(k, k, cin, cout))
        b = local.normal(size=cout)
        out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride,
                     dilation=dilation, padding=padding)
        expected = conv2d_oracle(x, wt, b, stride=stride, dilation=dilation, padding=padding)
        assert out.data.shape == expected.shape
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestSoftmax:
    def test_uniform_on_zeros(self):
        out = softmax(Tensor(np.zeros(3)), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_dominance_without_overflow(self):
        out = softmax(Tensor(np.array([1000.0, 0.0, 0.0])), axis=0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0, 0.0], atol=1e-12)

    def test_hand_evaluated_values(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x - 3.0)
        out = softmax(Tensor(x), axis=0)
        np.testing.assert_allclose(out.data, e / e.sum(), rtol=1e-12)

    def test_axis_out_of_bounds(self):
        with pytest.raises(ContractError):
            softmax(Tensor(np.zeros((2, 3))), axis=2)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 16), shift=st.floats(-50, 50),
           shape=st.sampled_from([(4,), (2, 5), (3, 2, 4)]))
    def test_sums_to_one_and_shift_invariant(self, seed, shift, shape):
        local = np.random.default_rng(seed)
        x = local.normal(size=shape) * 10
        axis = len(shape) - 1
        y = softmax(Tensor(x), axis=axis)
        np.testing.assert_allclose(y.data.sum(axis=axis), 1.0, atol=1e-6)
        assert (y.data >= 0).all()
        y2 = softmax(Tensor(x + shift), axis=axis)
        np.testing.assert_allclose(y.data, y2.data, atol=1e-9)


class TestInstanceNorm:
    def test_two_sample_channel(self):
        x = np.array([1.0, 3.0]).reshape(1, 1, 2, 1)
        normalized, mean, sd = instance_norm(Tensor(x))
        assert mean.item() == pytest.approx(2.0)
        assert sd.item() == pytest.approx(1.0, abs=1e-4)
        np.testing.assert_allclose(normalized.data.ravel(), [-1.0, 1.0], atol=1e-4)

    def test_fixed_point(self, rng):
        x = rng.normal(size=(1, 8, 8, 2))
        x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
        normalized, _, _ = instance_norm(Tensor(x))
        np.testing.assert_allclose(normalized.data, x, atol=1e-4)

    def test_round_trip_identity(self, rng):
        x = rng.normal(size=(2, 6, 7, 3)) * 4 + 1
        normalized, mean, sd = instance_norm(Tensor(x))
        restored = normalized.data * sd.data + mean.data
        np.testing.assert_allclose(restored, x, atol=1e-5)

    def test_constant_channel_yields_zeros(self):
        x = np.full((1, 4, 4, 1), 7.0)
        normalized, _, _ = instance_norm(Tensor(x))
        np.testing.assert_allclose(normalized.data, 0.0, atol=1e-5)

    def test_stats_shapes(self, rng):
        _, mean, sd = instance_norm(Tensor(rng.normal(size=(2, 4, 5, 3))))
        assert mean.data.shape == (2, 1, 1, 3)
        assert sd.data.shape == (2, 1, 1, 3)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_l1_of_self_is_zero_grad(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 1)), requires_grad=True)
        backward(l1_loss(x, x))
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(add(x, x))

    def test_repeated_passes_accumulate(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        first = x.grad.copy()
        backward(tensor_sum(mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_no_grad_suppresses_recording(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with no_grad():
            y = tensor_sum(mul(x, x))
        assert not y.requires_grad

    def test_diamond_graph(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = mul(x, x)
        backward(add(y, y))
        np.testing.assert_allclose(x.grad, [8.0])


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestGradientsVsFiniteDifferences:
    """Every differentiable op, 64-bit, central differences, rel err < 1e-4."""

    def test_elementwise_and_reductions(self, rng64):
        a = _rand(rng64, 3, 4)
        b = _rand(rng64, 3, 4)
        cases = [
            lambda: tensor_sum(mul(add(a, b), sub(a, b))),
            lambda: tensor_sum(div(a, add(mul(b, b), 1.0))),
            lambda: tensor_sum(absolute(a)),
            lambda: tensor_sum(sqrt(add(mul(a, a), 0.5))),
            lambda: tensor_mean(relu(a), axis=1),
            lambda: tensor_sum(tensor_mean(a, axis=0, keepdims=True)),
        ]
        for f in cases:
            loss = f()
            if loss.data.size != 1:
                f_scalar = (lambda g: lambda: tensor_sum(g()))(f)
            else:
                f_scalar = f
            assert check_gradients(f_scalar, [a, b], max_entries=None) < 1e-4

    def test_broadcast_binary_ops(self, rng64):
        a = _rand(rng64, 2, 3, 4)
        b = _rand(rng64, 1, 1, 4)
        assert check_gradients(lambda: tensor_sum(mul(a, b)), [a, b], max_entries=None) < 1e-4
        assert check_gradients(lambda: tensor_sum(div(a, add(mul(b, b), 1.0))), [a, b],
                               max_entries=None) < 1e-4

    def test_conv2d_grads(self, rng64):
        x = _rand(rng64, 2, 5, 6, 2)
        w = _rand(rng64, 3, 3, 2, 3)
        b = _rand(rng64, 3)
        fixed = Tensor(rng64.normal(size=(2, 5, 6, 3)))
        for padding in ("zero", "replicate"):
            for dilation in (1, 2):
                f = lambda: tensor_sum(mul(conv2d(x, w, b, dilation=dilation, padding=padding), fixed))
                assert check_gradients(f, [x, w, b], max_entries=40, rng=rng64) < 1e-4

    def test_strided_conv_grads(self, rng64):
        x = _rand(rng64, 1, 6, 6, 2)
        w = _rand(rng64, 3, 3, 2, 2)
        f = lambda: tensor_sum(conv2d(x, w, stride=2, padding="zero"))
        assert check_gradients(f, [x, w], max_entries=None) < 1e-4

    def test_pool_and_upsample_grads(self, rng64):
        x = _rand(rng64, 1, 4, 6, 2)
        fixed_p = Tensor(rng64.normal(size=(1, 2, 3, 2)))
        assert check_gradients(lambda: tensor_sum(mul(avg_pool2x(x), fixed_p)), [x],
                               max_entries=None) < 1e-4
        fixed_u = Tensor(rng64.normal(size=(1, 8, 12, 2)))
        assert check_gradients(lambda: tensor_sum(mul(upsample2x(x), fixed_u)), [x],
                               max_entries=None) < 1e-4

    def test_softmax_grads(self, rng64):
        x = _rand(rng64, 2, 3, 5)
        fixed = Tensor(rng64.normal(size=(2, 3, 5)))
        f = lambda: tensor_sum(mul(softmax(x, axis=2), fixed))
        assert check_gradients(f, [x], max_entries=None) < 1e-4

    def test_instance_norm_grads(self, rng64):
        x = _rand(rng64, 2, 3, 4, 2)
        fixed = Tensor(rng64.normal(size=(2, 3, 4, 2)))

        def f():
            normalized, mean, sd = instance_norm(x)
            return tensor_sum(mul(add(mul(normalized, sd), mean), mul(fixed, normalized)))

        assert check_gradients(f, [x], max_entries=None) < 1e-4

    def test_concat_slice_pad_crop_grads(self, rng64):
        a = _rand(rng64, 1, 3, 4, 2)
        b = _rand(rng64, 1, 3, 4, 1)
        fixed = Tensor(rng64.normal(size=(1, 3, 4, 3)))

        def f():
            joined = concat([a, b], axis=3)
            return tensor_sum(mul(joined, fixed))

        assert check_gradients(f, [a, b], max_entries=None) < 1e-4

        fixed2 = Tensor(rng64.normal(size=(1, 3, 4, 1)))
        f2 = lambda: tensor_sum(mul(take_channels(a, 1, 2), fixed2))
        assert check_gradients(f2, [a], max_entries=None) < 1e-4

        padded_fixed = Tensor(rng64.normal(size=(1, 6, 7, 2)))
        f3 = lambda: tensor_sum(mul(pad2d_replicate(a, 1, 2, 1, 2), padded_fixed))
        assert check_gradients(f3, [a], max_entries=None) < 1e-4

        crop_fixed = Tensor(rng64.normal(size=(1, 2, 2, 2)))
        f4 = lambda: tensor_sum(mul(crop2d(a, 1, 3, 1, 3), crop_fixed))
        assert check_gradients(f4, [a], max_entries=None) < 1e-4

    def test_channel_affine_grads(self, rng64):
        x = _rand(rng64, 1, 4, 4, 3)
        m = rng64.normal(size=(2, 3))
        fixed = Tensor(rng64.normal(size=(1, 4, 4, 2)))
        f = lambda: tensor_sum(mul(channel_affine(x, m, np.array([0.1, -0.2])), fixed))
        assert check_gradients(f, [x], max_entries=None) < 1e-4


class TestParameterSetAndAdam:
    def make_params(self, rng):
        params = ParameterSet()
        params.add("a", Tensor(rng.normal(size=(2, 2)).astype(np.float64)))
        params.add("b", Tensor(rng.normal(size=(3,)).astype(np.float64)))
        return params

    def test_duplicate_name_rejected(self, rng):
        params = self.make_params(rng)
        with pytest.raises(ContractError):
            params.add("a", Tensor(np.zeros(1)))

    def test_zero_grads_leave_params_unchanged(self, rng):
        params = self.make_params(rng)
        before = {k: v.data.copy() for k, v in params.items()}
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
        state = OptimizerState(learning_rate=0.1)
        adam_step(params, state)
        assert state.step_count == 1
        for k, v in params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_missing_grad_rejected(self, rng):
        params = self.make_params(rng)
        params["a"].grad = np.zeros_like(params["a"].data)
        with pytest.raises(ContractError):
            adam_step(params, OptimizerState())

    def test_single_step_matches_hand_formula(self):
        params = ParameterSet()
        p = params.add("w", Tensor(np.array([1.0])))
        g = 0.3
        p.grad = np.array([g])
        state = OptimizerState(learning_rate=0.01)
        adam_step(params, state)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)

    def test_two_steps_match_hand_trace(self):
        params = ParameterSet()
        p = params.add("w", Tensor(np.array([2.0])))
        state = OptimizerState(learning_rate=0.05)
        g = -0.7
        m = v = 0.0
        w = 2.0
        for t in (1, 2):
            p.grad = np.array([g])
            adam_step(params, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(w, rel=1e-12)
        assert state.step_count == 2

    def test_non_finite_step_raises(self):
        params = ParameterSet()
        p = params.add("w", Tensor(np.array([1.0])))
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError):
            adam_step(params, OptimizerState())
