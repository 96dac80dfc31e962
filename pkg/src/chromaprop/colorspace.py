"""Color representations and the Lab-space PSNR metric.

Conventions, fixed so numbers are comparable across runs: BT.601 full-range
luma/chroma (Y in [0,1], u/v in [-0.5,0.5]), sRGB gamma with D65 white for
CIELAB, PSNR pooled over all three Lab channels with peak 100 and a 99 dB cap
for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractError


class Space(Enum):
    GRAY = "gray"
    RGB = "rgb"
    YUV = "yuv"
    LAB = "lab"


# BT.601 full-range RGB <-> Yuv
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YUV_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])

# sRGB (D65) linear RGB -> XYZ
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

PSNR_PEAK = 100.0
PSNR_CAP_DB = 99.0


@dataclass
class Image:
    """H x W x C sample grid tagged with its color space.

    RGB and GRAY samples are clamped to [0,1] on construction; YUV and LAB
    carry whatever range their transform produces. `name` optionally records
    the source file stem for extractors that key on it.
    """

    data: np.ndarray
    space: Space
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ContractError(f"image data must be HxWxC, got shape {self.data.shape}")
        expected = 1 if self.space is Space.GRAY else 3
        if self.data.shape[2] != expected:
            raise ContractError(
                f"{self.space.name} image needs {expected} channels, got {self.data.shape[2]}")
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if self.space in (Space.RGB, Space.GRAY):
            self.data = np.clip(self.data, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _require(img: Image, space: Space, op: str) -> None:
    if img.space is not space:
        raise ContractError(f"{op} expects a {space.name} image, got {img.space.name}")


def rgb_to_yuv(img: Image) -> Image:
    _require(img, Space.RGB, "rgb_to_yuv")
    out = img.data @ RGB_TO_YUV.T.astype(img.data.dtype)
    return Image(out, Space.YUV, name=img.name)


def rgb_to_gray(img: Image) -> Image:
    """BT.601 luma; shares the Yuv transform so Y and gray agree bit for bit."""
    yuv = rgb_to_yuv(img)
    return Image(yuv.data[:, :, :1].copy(), Space.GRAY, name=img.name)


def yuv_to_rgb(img: Image) -> Image:
    _require(img, Space.YUV, "yuv_to_rgb")
    out = img.data @ YUV_TO_RGB.T.astype(img.data.dtype)
    return Image(out, Space.RGB, name=img.name)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_lab(img: Image) -> Image:
    """sRGB -> linear -> XYZ (D65) -> CIELAB, L in [0,100]."""
    _require(img, Space.RGB, "rgb_to_lab")
    linear = _srgb_to_linear(np.clip(img.data, 0.0, 1.0).astype(np.float64))
    xyz = linear @ RGB_TO_XYZ.T
    ratio = xyz / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(ratio > delta ** 3, np.cbrt(ratio), ratio / (3 * delta ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return Image(lab, Space.LAB, name=img.name)


def psnr_lab(pred: Image, gt: Image) -> float:
    """PSNR after CIELAB conversion, MSE pooled over all three channels.

    Peak is 100 (the L range); identical inputs return the 99 dB cap, and the
    cap also bounds near-identical pairs so curves stay plottable.
    """
    _require(pred, Space.RGB, "psnr_lab")
    _require(gt, Space.RGB, "psnr_lab")
    if pred.data.shape != gt.data.shape:
        raise ContractError(f"psnr_lab dimension mismatch: {pred.data.shape} vs {gt.data.shape}")
    diff = rgb_to_lab(pred).data - rgb_to_lab(gt).data
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(PSNR_PEAK ** 2 / mse), PSNR_CAP_DB)
