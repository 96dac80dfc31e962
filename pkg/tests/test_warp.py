"""Warp operator laws: delta identity, constant preservation, translation
equivalence, linearity, and gradients of the warp objective."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chromaprop.colorspace import Image, Space
from chromaprop.errors import ContractError
from chromaprop.tensor import Tensor, check_gradients, l1_loss, softmax, tensor_sum, mul
from chromaprop.warp import (KernelField, WarpNet, apply_separable_kernels,
                             forward_padded, predict_kernels, separable_warp,
                             warp_loss)


def random_kernel_field(rng, h, w, k):
    v = rng.random((h, w, k))
    v /= v.sum(axis=2, keepdims=True)
    hz = rng.random((h, w, k))
    hz /= hz.sum(axis=2, keepdims=True)
    return KernelField(v, hz)


class TestKernelField:
    def test_validate_accepts_softmax_output(self, rng):
        kf = random_kernel_field(rng, 4, 5, 7)
        kf.validate()

    def test_negative_weights_rejected(self, rng):
        kf = random_kernel_field(rng, 4, 5, 7)
        kf.vertical[0, 0, 0] = -0.5
        with pytest.raises(ContractError):
            kf.validate()

    def test_unnormalized_rejected(self, rng):
        kf = random_kernel_field(rng, 4, 5, 7)
        kf.horizontal[1, 1] *= 2.0
        with pytest.raises(ContractError):
            kf.validate()

    def test_even_length_rejected(self):
        with pytest.raises(ContractError):
            KernelField(np.ones((2, 2, 4)) / 4, np.ones((2, 2, 4)) / 4)


class TestApplySeparableKernels:
    def test_delta_identity_bitwise(self, rng):
        img = Image(rng.random((10, 12, 3)), Space.RGB)
        kf = KernelField.delta(10, 12, 21)
        out = apply_separable_kernels(img, kf)
        np.testing.assert_array_equal(out.data, img.data)

    def test_constant_image_preserved(self, rng):
        for _ in range(5):
            kf = random_kernel_field(rng, 6, 7, 9)
            img = Image(np.full((6, 7, 3), 0.37), Space.RGB)
            out = apply_separable_kernels(img, kf)
            np.testing.assert_allclose(out.data, 0.37, atol=1e-5)

    @settings(max_examples=20, deadline=None)
    @given(dy=st.integers(-3, 3), dx=st.integers(-3, 3), seed=st.integers(0, 999))
    def test_shifted_delta_translates_interior(self, dy, dx, seed):
        local = np.random.default_rng(seed)
        data = local.random((12, 13, 3))
        img = Image(data, Space.RGB)
        kf = KernelField.delta(12, 13, 9, offset_y=dy, offset_x=dx)
        out = apply_separable_kernels(img, kf)
        # out(y,x) = img(y+dy, x+dx) wherever the source stays in bounds
        m = 4
        expected = data[m + dy:12 - m + dy, m + dx:13 - m + dx]
        np.testing.assert_array_equal(out.data[m:12 - m, m:13 - m], expected)

    def test_linearity_in_color(self, rng):
        kf = random_kernel_field(rng, 8, 8, 5)
        x = rng.random((8, 8, 3))
        y = rng.random((8, 8, 3))
        a, b = 0.3, 0.6
        combo = apply_separable_kernels(Image(a * x + b * y, Space.RGB), kf).data
        parts = (a * apply_separable_kernels(Image(x, Space.RGB), kf).data
                 + b * apply_separable_kernels(Image(y, Space.RGB), kf).data)
        np.testing.assert_allclose(combo, parts, atol=1e-5)

    def test_grid_mismatch_rejected(self, rng):
        img = Image(rng.random((8, 8, 3)), Space.RGB)
        with pytest.raises(ContractError):
            apply_separable_kernels(img, random_kernel_field(rng, 6, 8, 5))


class TestWarpLoss:
    def test_identical_images(self, rng):
        img = Image(rng.random((5, 5, 3)), Space.RGB)
        assert warp_loss(img, Image(img.data.copy(), Space.RGB)) == 0.0

    def test_constant_offset(self, rng):
        a = Image(np.full((4, 6, 3), 0.4), Space.RGB)
        b = Image(np.full((4, 6, 3), 0.5), Space.RGB)
        assert warp_loss(a, b) == pytest.approx(0.1, abs=1e-7)

    def test_matches_direct_summation(self, rng):
        a = rng.random((7, 5, 3))
        b = rng.random((7, 5, 3))
        expected = float(np.abs(a - b).sum() / a.size)
        assert warp_loss(Image(a, Space.RGB), Image(b, Space.RGB)) == pytest.approx(expected, rel=1e-6)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ContractError):
            warp_loss(Image(rng.random((4, 4, 3)), Space.RGB),
                      Image(rng.random((4, 5, 3)), Space.RGB))


class TestWarpGradients:
    def test_warp_loss_grad_wrt_logits_vs_finite_differences(self, rng64):
        h, w, k = 5, 6, 5
        color = Tensor(rng64.random((1, h, w, 3)))
        target = Tensor(rng64.random((1, h, w, 3)))
        logits_v = Tensor(rng64.normal(size=(1, h, w, k)), requires_grad=True)
        logits_h = Tensor(rng64.normal(size=(1, h, w, k)), requires_grad=True)

        def f():
            warped = separable_warp(color, softmax(logits_v, 3), softmax(logits_h, 3))
            return l1_loss(warped, target)

        assert check_gradients(f, [logits_v, logits_h], max_entries=60, rng=rng64) < 1e-4

    def test_warp_grad_wrt_color(self, rng64):
        color = Tensor(rng64.random((1, 5, 5, 2)), requires_grad=True)
        kv = Tensor(rng64.dirichlet(np.ones(5), size=(1, 5, 5)))
        kh = Tensor(rng64.dirichlet(np.ones(5), size=(1, 5, 5)))
        fixed = Tensor(rng64.normal(size=(1, 5, 5, 2)))
        f = lambda: tensor_sum(mul(separable_warp(color, kv, kh), fixed))
        assert check_gradients(f, [color], max_entries=None) < 1e-4


class TestWarpNet:
    def test_softmax_postconditions(self, rng):
        net = WarpNet(kernel_size=11, rng=np.random.default_rng(0))
        g1 = Image(rng.random((32, 32, 1)), Space.GRAY)
        g2 = Image(rng.random((32, 32, 1)), Space.GRAY)
        kf = predict_kernels(net, g1, g2)
        kf.validate()
        assert kf.k == 11

    def test_zero_head_init_gives_uniform_kernels(self, rng):
        net = WarpNet(kernel_size=7, rng=np.random.default_rng(0), head_init="zero")
        g = Image(rng.random((32, 32, 1)), Space.GRAY)
        kf = predict_kernels(net, g, g)
        np.testing.assert_allclose(kf.vertical, 1 / 7, atol=1e-6)
        np.testing.assert_allclose(kf.horizontal, 1 / 7, atol=1e-6)

    def test_deterministic_for_fixed_params(self, rng):
        net = WarpNet(kernel_size=7, rng=np.random.default_rng(3))
        g1 = Image(rng.random((32, 32, 1)), Space.GRAY)
        g2 = Image(rng.random((32, 32, 1)), Space.GRAY)
        a = predict_kernels(net, g1, g2)
        b = predict_kernels(net, g1, g2)
        np.testing.assert_array_equal(a.vertical, b.vertical)
        np.testing.assert_array_equal(a.horizontal, b.horizontal)

    def test_dimension_mismatch_rejected(self, rng):
        net = WarpNet(kernel_size=7, rng=np.random.default_rng(3))
        with pytest.raises(ContractError):
            predict_kernels(net, Image(rng.random((32, 32, 1)), Space.GRAY),
                            Image(rng.random((32, 48, 1)), Space.GRAY))

    def test_padded_forward_handles_odd_sizes(self, rng):
        net = WarpNet(kernel_size=7, rng=np.random.default_rng(3))
        g1 = Image(rng.random((37, 45, 1)), Space.GRAY)
        g2 = Image(rng.random((37, 45, 1)), Space.GRAY)
        kf = predict_kernels(net, g1, g2)
        assert kf.vertical.shape == (37, 45, 7)
        kf.validate()

    def test_checkpoint_entries_use_warp_prefix(self):
        net = WarpNet(kernel_size=5, rng=np.random.default_rng(0))
        assert all(name.startswith("warp.") for name in net.params.names())
