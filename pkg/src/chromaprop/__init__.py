"""Color propagation for grayscale video from a single colored reference frame."""

__version__ = "0.1.0"

from .colorspace import Image, Space, psnr_lab, rgb_to_gray, rgb_to_lab, rgb_to_yuv, yuv_to_rgb
from .errors import ChromapropError, ContractError, FormatError, NumericError

__all__ = [
    "Image", "Space", "psnr_lab", "rgb_to_gray", "rgb_to_lab", "rgb_to_yuv",
    "yuv_to_rgb", "ChromapropError", "ContractError", "FormatError", "NumericError",
]
