"""Frame-to-frame color propagation through predicted separable kernels.

A kernel-prediction network looks at two consecutive gray frames and emits,
for every pixel, a vertical and a horizontal 1D kernel. Their outer product
is the 2D resampling kernel applied to the previous color frame, so motion
and resampling are handled in one step. Kernels come out of a per-pixel
softmax: nonnegative, summing to one, which makes warping a convex
combination (constant images are preserved exactly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .colorspace import Image, Space
from .errors import ContractError
from .optim import ParameterSet
from .tensor import (Tensor, _fold_padding, _node, avg_pool2x, concat, conv2d,
                     crop2d, he_uniform, mul, pad2d_replicate, relu, softmax,
                     tanh, upsample2x)

KERNEL_SUM_TOL = 1e-5
ENCODER_CHANNELS = (32, 64, 128, 256)
DOWNSAMPLE_FACTOR = 2 ** len(ENCODER_CHANNELS)
# kernel logits are squashed into [-LOGIT_RANGE, LOGIT_RANGE] before the
# softmax: an unbounded head saturates to an exact one-hot in float32, which
# zeroes every gradient and freezes training in whatever state it reached
LOGIT_RANGE = 6.0


@dataclass
class KernelField:
    """Per-pixel separable kernel pair over an image grid.

    vertical/horizontal have shape (H, W, k) with odd k; each length-k vector
    is nonnegative and sums to 1 within KERNEL_SUM_TOL.
    """

    vertical: np.ndarray
    horizontal: np.ndarray

    def __post_init__(self):
        if self.vertical.shape != self.horizontal.shape:
            raise ContractError("vertical/horizontal kernel shapes differ")
        if self.vertical.ndim != 3 or self.vertical.shape[2] % 2 == 0:
            raise ContractError("kernels must be (H,W,k) with odd k")

    @property
    def k(self) -> int:
        return self.vertical.shape[2]

    def validate(self) -> None:
        for name, arr in (("vertical", self.vertical), ("horizontal", self.horizontal)):
            if (arr < -KERNEL_SUM_TOL).any():
                raise ContractError(f"{name} kernels contain negative weights")
            sums = arr.sum(axis=2)
            if np.abs(sums - 1.0).max() > KERNEL_SUM_TOL:
                raise ContractError(f"{name} kernels do not sum to 1")

    @classmethod
    def delta(cls, height: int, width: int, k: int, offset_y: int = 0,
              offset_x: int = 0, dtype=np.float64) -> "KernelField":
        """All-delta field; a zero offset makes warping the identity map."""
        center = k // 2
        v = np.zeros((height, width, k), dtype=dtype)
        h = np.zeros((height, width, k), dtype=dtype)
        v[:, :, center + offset_y] = 1.0
        h[:, :, center + offset_x] = 1.0
        return cls(v, h)


# ---------------------------------------------------------------------------
# differentiable separable warp
# ---------------------------------------------------------------------------

def separable_warp(color: Tensor, kv: Tensor, kh: Tensor) -> Tensor:
    """out[n,y,x,c] = sum_ij kv[n,y,x,i] * kh[n,y,x,j] * pad(color)[n,y+i,x+j,c].

    Replicate padding supplies the border patches. Differentiable with
    respect to the color frame and both kernel maps.
    """
    if color.data.ndim != 4 or kv.data.ndim != 4:
        raise ContractError("separable_warp expects NHWC color and NHWk kernels")
    if kv.data.shape != kh.data.shape:
        raise ContractError("kernel map shapes differ")
    n, h, w, c = color.data.shape
    if kv.data.shape[:3] != (n, h, w):
        raise ContractError(
            f"kernel grid {kv.data.shape[:3]} does not match color grid {(n, h, w)}")
    k = kv.data.shape[3]
    if k % 2 == 0:
        raise ContractError("kernel length must be odd")
    c0 = k // 2

    padded = np.pad(color.data, ((0, 0), (c0, c0), (c0, c0), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(1, 2))  # (N,H,W,C,k,k)
    # contract j then i; the intermediate also serves the kv gradient
    hpass = np.einsum("nhwcij,nhwj->nhwci", win, kh.data)
    out = np.einsum("nhwci,nhwi->nhwc", hpass, kv.data)

    def bwd(g):
        if kv.requires_grad:
            kv._accumulate(np.einsum("nhwci,nhwc->nhwi", hpass, g))
        if kh.requires_grad:
            vpass = np.einsum("nhwcij,nhwi->nhwcj", win, kv.data)
            kh._accumulate(np.einsum("nhwcj,nhwc->nhwj", vpass, g))
        if color.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(k):
                wi = kv.data[:, :, :, i]
                for j in range(k):
                    weight = (wi * kh.data[:, :, :, j])[..., None]
                    gpad[:, i:i + h, j:j + w, :] += g * weight
            color._accumulate(_fold_padding(gpad, c0, c0, c0, c0))

    return _node(out, (color, kv, kh), bwd)


# ---------------------------------------------------------------------------
# kernel-prediction network
# ---------------------------------------------------------------------------

class WarpNet:
    """U-shaped encoder-decoder predicting the per-pixel kernel pair.

    Input is the two stacked gray frames; four encoder stages of two 3x3
    convolutions each halve resolution via average pooling, a symmetric
    decoder restores it with bilinear upsampling and skip connections, and
    two zero-initialized heads emit the kernel logits (so an untrained net
    produces uniform kernels).
    """

    PREFIX = "warp."

    def __init__(self, kernel_size: int = 21, dtype=np.float32,
                 rng: np.random.Generator | None = None, head_init: str = "small"):
        if kernel_size % 2 == 0 or kernel_size < 3:
            raise ContractError("kernel_size must be odd and >= 3")
        if head_init not in ("small", "zero"):
            raise ContractError(f"unknown head_init {head_init!r}")
        self.kernel_size = kernel_size
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        self.params = ParameterSet()
        self._decoder_channels = (128, 64, 32, 32)

        def conv_param(name, kh, kw, cin, cout, scale=1.0, zero=False):
            shape = (kh, kw, cin, cout)
            weights = np.zeros(shape, dtype=dtype) if zero else scale * he_uniform(
                rng, shape, fan_in=kh * kw * cin, dtype=dtype)
            self.params.add(self.PREFIX + name + ".w", Tensor(weights))
            self.params.add(self.PREFIX + name + ".b", Tensor(np.zeros(cout, dtype=dtype)))

        cin = 2
        for s, ch in enumerate(ENCODER_CHANNELS, start=1):
            conv_param(f"enc{s}.c1", 3, 3, cin, ch)
            conv_param(f"enc{s}.c2", 3, 3, ch, ch)
            cin = ch
        prev = ENCODER_CHANNELS[-1]
        for s, out_ch in zip(range(len(ENCODER_CHANNELS), 0, -1), self._decoder_channels):
            skip_ch = ENCODER_CHANNELS[s - 1]
            conv_param(f"dec{s}.c1", 3, 3, prev + skip_ch, out_ch)
            conv_param(f"dec{s}.c2", 3, 3, out_ch, out_ch)
            prev = out_ch
        # small random heads start near-uniform yet keep step-1 gradients alive
        # in the trunk; "zero" gives exactly uniform kernels until trained
        zero_heads = head_init == "zero"
        conv_param("head_v", 3, 3, prev, kernel_size, scale=0.1, zero=zero_heads)
        conv_param("head_h", 3, 3, prev, kernel_size, scale=0.1, zero=zero_heads)

    def _conv(self, x: Tensor, name: str, activate: bool = True) -> Tensor:
        p = self.params
        y = conv2d(x, p[self.PREFIX + name + ".w"], p[self.PREFIX + name + ".b"])
        return relu(y) if activate else y

    def forward(self, pair: Tensor) -> tuple[Tensor, Tensor]:
        """Gray pair (N,H,W,2) -> softmax-normalized (kv, kh), each (N,H,W,k)."""
        n, h, w, c = pair.data.shape
        if c != 2:
            raise ContractError(f"expected 2 stacked gray channels, got {c}")
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ContractError(
                f"spatial extents must be multiples of {DOWNSAMPLE_FACTOR}, got {h}x{w}")
        x = pair
        skips = []
        for s in range(1, len(ENCODER_CHANNELS) + 1):
            x = self._conv(x, f"enc{s}.c1")
            x = self._conv(x, f"enc{s}.c2")
            skips.append(x)
            x = avg_pool2x(x)
        for s in range(len(ENCODER_CHANNELS), 0, -1):
            x = upsample2x(x)
            x = concat([x, skips[s - 1]], axis=3)
            x = self._conv(x, f"dec{s}.c1")
            x = self._conv(x, f"dec{s}.c2")

        def head(name: str) -> Tensor:
            logits = mul(tanh(mul(self._conv(x, name, activate=False),
                                  1.0 / LOGIT_RANGE)), LOGIT_RANGE)
            return softmax(logits, axis=3)

        return head("head_v"), head("head_h")


def _pad_extent(size: int) -> int:
    return (-size) % DOWNSAMPLE_FACTOR


def forward_padded(net: WarpNet, pair: Tensor) -> tuple[Tensor, Tensor]:
    """Run the net on any frame size by replicate-padding to the stride multiple."""
    _, h, w, _ = pair.data.shape
    pb, pr = _pad_extent(h), _pad_extent(w)
    if pb or pr:
        pair = pad2d_replicate(pair, 0, pb, 0, pr)
    kv, kh = net.forward(pair)
    if pb or pr:
        kv = crop2d(kv, 0, h, 0, w)
        kh = crop2d(kh, 0, h, 0, w)
    return kv, kh


def predict_kernels(net: WarpNet, g_prev: Image, g_cur: Image) -> KernelField:
    if g_prev.space is not Space.GRAY or g_cur.space is not Space.GRAY:
        raise ContractError("predict_kernels expects GRAY images")
    if g_prev.data.shape != g_cur.data.shape:
        raise ContractError(
            f"frame dimension mismatch: {g_prev.data.shape} vs {g_cur.data.shape}")
    pair = np.concatenate([g_prev.data, g_cur.data], axis=2)[None].astype(net.dtype)
    kv, kh = forward_padded(net, Tensor(pair))
    return KernelField(kv.data[0], kh.data[0])


def apply_separable_kernels(color: Image, kf: KernelField) -> Image:
    if color.space is not Space.RGB:
        raise ContractError("apply_separable_kernels expects an RGB image")
    if kf.vertical.shape[:2] != color.data.shape[:2]:
        raise ContractError(
            f"kernel grid {kf.vertical.shape[:2]} does not match image {color.data.shape[:2]}")
    out = separable_warp(Tensor(color.data[None]),
                         Tensor(kf.vertical[None]), Tensor(kf.horizontal[None]))
    return Image(out.data[0], Space.RGB)


def warp_loss(warped: Image, gt: Image) -> float:
    """Mean absolute difference over all samples."""
    if warped.data.shape != gt.data.shape:
        raise ContractError(
            f"warp_loss dimension mismatch: {warped.data.shape} vs {gt.data.shape}")
    return float(np.mean(np.abs(warped.data - gt.data)))
