"""Fusing the warped and globally matched estimates into the final frame.

The two intermediate color estimates are converted to Yuv and stacked with
the gray frame (7 channels), jointly instance-normalized, and pushed through
a dilated all-stride-1 convolution trunk that predicts the two chroma
channels in normalized units. The retained chroma statistics de-normalize
the prediction, the gray frame is reused verbatim as luminance, and only
then is the result converted to RGB and clamped. Training therefore sees
unclamped chroma, and the output luminance equals the input gray frame by
construction.
"""

from __future__ import annotations

import numpy as np

from .colorspace import RGB_TO_YUV, Image, Space, rgb_to_yuv, yuv_to_rgb
from .errors import ContractError
from .optim import ParameterSet
from .tensor import (Tensor, add, channel_affine, concat, conv2d, he_uniform,
                     instance_norm, mul, no_grad, relu, take_channels,
                     tensor_mean, absolute, sub)

TRUNK_DILATIONS = (1, 2, 4, 1, 1)
STACK_CHANNELS = 7
# chroma positions inside the [g, Y_w, u_w, v_w, Y_s, u_s, v_s] stack
U_CHANNELS = (2, 5)
V_CHANNELS = (3, 6)


class FusionNet:
    """Five dilated 3x3 conv layers plus a zero-initialized projection."""

    PREFIX = "fusion."

    def __init__(self, channels: int = 64, dtype=np.float32,
                 rng: np.random.Generator | None = None):
        if channels < 1:
            raise ContractError("channels must be positive")
        self.channels = channels
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        self.params = ParameterSet()
        cin = STACK_CHANNELS
        for i in range(len(TRUNK_DILATIONS)):
            shape = (3, 3, cin, channels)
            self.params.add(f"{self.PREFIX}conv{i + 1}.w",
                            Tensor(he_uniform(rng, shape, fan_in=9 * cin, dtype=dtype)))
            self.params.add(f"{self.PREFIX}conv{i + 1}.b",
                            Tensor(np.zeros(channels, dtype=dtype)))
            cin = channels
        # zero projection: the untrained net emits the stack's mean chroma
        self.params.add(f"{self.PREFIX}proj.w", Tensor(np.zeros((3, 3, channels, 2), dtype=dtype)))
        self.params.add(f"{self.PREFIX}proj.b", Tensor(np.zeros(2, dtype=dtype)))

    def trunk(self, normalized: Tensor) -> Tensor:
        """Dilated conv trunk plus projection; spatial reach is 10 pixels."""
        x = normalized
        for i, dilation in enumerate(TRUNK_DILATIONS, start=1):
            p = self.params
            x = relu(conv2d(x, p[f"{self.PREFIX}conv{i}.w"], p[f"{self.PREFIX}conv{i}.b"],
                            dilation=dilation))
        return conv2d(x, self.params[f"{self.PREFIX}proj.w"], self.params[f"{self.PREFIX}proj.b"])

    def forward_chroma(self, stack: Tensor) -> Tensor:
        """7-channel Yuv stack (N,H,W,7) -> unclamped chroma (N,H,W,2)."""
        if stack.data.ndim != 4 or stack.data.shape[3] != STACK_CHANNELS:
            raise ContractError(
                f"fusion stack must be (N,H,W,{STACK_CHANNELS}), got {stack.data.shape}")
        normalized, mean, sd = instance_norm(stack)
        uv = self.trunk(normalized)

        def chroma_stat(stat: Tensor, chans: tuple[int, int]) -> Tensor:
            return mul(add(take_channels(stat, chans[0], chans[0] + 1),
                           take_channels(stat, chans[1], chans[1] + 1)), 0.5)

        mean_uv = concat([chroma_stat(mean, U_CHANNELS), chroma_stat(mean, V_CHANNELS)], axis=3)
        sd_uv = concat([chroma_stat(sd, U_CHANNELS), chroma_stat(sd, V_CHANNELS)], axis=3)
        return add(mul(uv, sd_uv), mean_uv)


def build_fusion_stack(gray: Tensor, warped_rgb: Tensor, matched_rgb: Tensor) -> Tensor:
    """Assemble [gray, Yuv(warped), Yuv(matched)] along channels, differentiably."""
    to_yuv = RGB_TO_YUV
    return concat([gray, channel_affine(warped_rgb, to_yuv),
                   channel_affine(matched_rgb, to_yuv)], axis=3)


def _check_fuse_inputs(gk: Image, warped: Image, matched: Image) -> None:
    if gk.space is not Space.GRAY:
        raise ContractError("fuse expects a GRAY guide frame")
    if warped.space is not Space.RGB or matched.space is not Space.RGB:
        raise ContractError("fuse expects RGB intermediate estimates")
    if not (gk.data.shape[:2] == warped.data.shape[:2] == matched.data.shape[:2]):
        raise ContractError("fuse inputs must share dimensions")


def fuse_yuv(net: FusionNet, gk: Image, warped: Image, matched: Image) -> Image:
    """Pre-conversion output: luminance is the gray frame itself, bit for bit."""
    _check_fuse_inputs(gk, warped, matched)
    stack = np.concatenate([gk.data, rgb_to_yuv(warped).data, rgb_to_yuv(matched).data],
                           axis=2)[None].astype(net.dtype)
    with no_grad():
        uv = net.forward_chroma(Tensor(stack))
    return Image(np.concatenate([gk.data, uv.data[0].astype(gk.data.dtype)], axis=2),
                 Space.YUV)


def fuse(net: FusionNet, gk: Image, warped: Image, matched: Image) -> Image:
    """Final fused frame in RGB, clamped to [0,1]."""
    return yuv_to_rgb(fuse_yuv(net, gk, warped, matched))


def image_loss(pred: Image, gt: Image) -> float:
    """Mean absolute chroma difference in Yuv space.

    Luminance is pinned to the gray frame by construction, so the objective
    lives entirely on the two chroma channels.
    """
    if pred.space is not Space.RGB or gt.space is not Space.RGB:
        raise ContractError("image_loss expects RGB images")
    if pred.data.shape != gt.data.shape:
        raise ContractError(
            f"image_loss dimension mismatch: {pred.data.shape} vs {gt.data.shape}")
    pu = rgb_to_yuv(pred).data[:, :, 1:]
    gu = rgb_to_yuv(gt).data[:, :, 1:]
    return float(np.mean(np.abs(pu - gu)))


def chroma_loss(pred_uv: Tensor, target_uv: Tensor) -> Tensor:
    """Differentiable form of the image objective on raw chroma tensors."""
    if pred_uv.data.shape != target_uv.data.shape:
        raise ContractError(
            f"chroma_loss shape mismatch: {pred_uv.data.shape} vs {target_uv.data.shape}")
    return tensor_mean(absolute(sub(pred_uv, target_uv)))
