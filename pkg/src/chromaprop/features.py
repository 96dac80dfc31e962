"""Descriptor grids for matching a frame against the colored reference.

Two pyramid levels are used: a COARSE grid (one descriptor per r x r cell,
region-level context) that narrows the search, and a FINE grid (stride 1,
texture statistics) that picks the final source pixel. The built-in extractor
is deterministic, shift-equivariant, and needs no pretrained weights; an
import-backed extractor reads precomputed maps from .fmap files so features
from any external network can be dropped in without touching the matcher.

The built-in COARSE descriptor is a smoothed-luminance template: box-blurred
gray sampled on two tap grids around the cell center, a dense grid for local
pattern and a wide sparse grid for regional context. Pooled cell statistics
(mean/deviation/orientation histogram) proved far too collision-prone for
exact correspondence recovery; the two-scale template disambiguates
repetitive regions while staying smooth under sub-cell misalignment.

Feature-map file layout (little-endian):

    magic  b"FMAP"
    version u32 (currently 1)
    level   u8 (0 = coarse, 1 = fine)
    h, w, d, stride  u32 each
    data    float32, row-major (h, w, d)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .colorspace import Image, Space
from .errors import ContractError, FormatError

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

FINE_DEPTH = 4
MIN_COARSE_RATIO = 4


class Level(Enum):
    COARSE = 0
    FINE = 1


@dataclass
class FeatureMap:
    """H' x W' x D descriptor grid with its pixel stride and pyramid level."""

    data: np.ndarray
    level: Level
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"feature map must be (H',W',D), got {self.data.shape}")
        if self.level is Level.FINE and self.stride != 1:
            raise ContractError("FINE maps must have stride 1")
        if self.level is Level.COARSE and self.stride < MIN_COARSE_RATIO:
            raise ContractError(f"COARSE stride must be >= {MIN_COARSE_RATIO}")

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


def grid_extent(image_extent: int, stride: int) -> int:
    return -(-image_extent // stride)


def _check_grid(fm: FeatureMap, img: Image) -> FeatureMap:
    expect = (grid_extent(img.height, fm.stride), grid_extent(img.width, fm.stride))
    if fm.grid_shape() != expect:
        raise FormatError(
            f"feature grid {fm.grid_shape()} does not cover a {img.height}x{img.width} "
            f"image at stride {fm.stride} (expected {expect})")
    return fm


# ---------------------------------------------------------------------------
# built-in extractor
# ---------------------------------------------------------------------------

def _box_stats(gray: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and standard deviation over a (2r+1)^2 replicate-padded box."""
    size = 2 * radius + 1
    padded = np.pad(gray, radius, mode="edge").astype(np.float64)

    def box_sum(a):
        s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        s[1:, 1:] = a.cumsum(0).cumsum(1)
        return (s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size])

    n = size * size
    m = box_sum(padded) / n
    m2 = box_sum(padded * padded) / n
    return m, np.sqrt(np.maximum(m2 - m * m, 0.0))


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray, 1, mode="edge").astype(np.float64)
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2]) / 8.0
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:]) / 8.0
    return gx, gy


def _box_mean(a: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    padded = np.pad(a, radius, mode="edge").astype(np.float64)
    s = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    s[1:, 1:] = padded.cumsum(0).cumsum(1)
    return (s[size:, size:] - s[:-size, size:] - s[size:, :-size]
            + s[:-size, :-size]) / (size * size)


def _tap_offsets(ratio: int) -> tuple[tuple[int, tuple[int, ...]], ...]:
    # (blur radius, tap offsets) per context scale, proportional to the cell size
    r = ratio
    dense = tuple(int(round(f * r)) for f in (-1.25, -0.625, 0.0, 0.625, 1.25))
    wide = tuple(int(round(f * r)) for f in (-2.5, 0.0, 2.5))
    return ((max(1, int(round(0.375 * r))), dense),
            (max(2, int(round(0.75 * r))), wide))


class BuiltinExtractor:
    """Handcrafted two-level features: image+gradients+local sd at FINE,
    a two-scale smoothed-luminance template per cell at COARSE."""

    def __init__(self, coarse_ratio: int = 8, std_radius: int = 2):
        if coarse_ratio < MIN_COARSE_RATIO:
            raise ContractError(f"coarse_ratio must be >= {MIN_COARSE_RATIO}")
        self.coarse_ratio = coarse_ratio
        self.std_radius = std_radius
        self.tag = f"builtin:r{coarse_ratio}"

    def extract(self, img: Image, level: Level) -> FeatureMap:
        if img.space is not Space.GRAY:
            raise ContractError("feature extraction expects a GRAY image")
        gray = img.data[:, :, 0].astype(np.float64)
        if level is Level.FINE:
            gx, gy = _sobel(gray)
            _, sd = _box_stats(gray, self.std_radius)
            data = np.stack([gray, gx, gy, sd], axis=-1).astype(np.float32)
            return FeatureMap(data, Level.FINE, 1)

        r = self.coarse_ratio
        h, w = gray.shape
        hc, wc = grid_extent(h, r), grid_extent(w, r)
        centers_y = np.minimum(np.arange(hc) * r + r // 2, h - 1)
        centers_x = np.minimum(np.arange(wc) * r + r // 2, w - 1)
        channels = []
        for blur, taps in _tap_offsets(r):
            smoothed = _box_mean(gray, blur)
            for dy in taps:
                rows = smoothed[np.clip(centers_y + dy, 0, h - 1)]
                for dx in taps:
                    channels.append(rows[:, np.clip(centers_x + dx, 0, w - 1)])
        data = np.stack(channels, axis=-1).astype(np.float32)
        return FeatureMap(data, Level.COARSE, r)


# ---------------------------------------------------------------------------
# import-backed extractor and the .fmap container
# ---------------------------------------------------------------------------

def write_feature_map(path: str | Path, fm: FeatureMap) -> None:
    h, w, d = fm.data.shape
    header = FMAP_MAGIC + struct.pack("<IBIIII", FMAP_VERSION, fm.level.value, h, w, d, fm.stride)
    Path(path).write_bytes(header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def read_feature_map(path: str | Path) -> FeatureMap:
    blob = Path(path).read_bytes()
    if blob[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad feature-map magic {blob[:4]!r}")
    version, level, h, w, d, stride = struct.unpack_from("<IBIIII", blob, 4)
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported feature-map version {version}")
    if level not in (0, 1):
        raise FormatError(f"{path}: unknown level tag {level}")
    offset = 4 + struct.calcsize("<IBIIII")
    count = h * w * d
    if len(blob) != offset + 4 * count:
        raise FormatError(f"{path}: payload size does not match header")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(h, w, d)
    return FeatureMap(data.copy(), Level(level), stride)


class ImportExtractor:
    """Serves precomputed feature maps from `<dir>/<image name>.<level>.fmap`."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FormatError(f"feature directory not found: {self.directory}")
        self.tag = f"import:{self.directory}"

    def path_for(self, name: str, level: Level) -> Path:
        suffix = "coarse" if level is Level.COARSE else "fine"
        return self.directory / f"{name}.{suffix}.fmap"

    def extract(self, img: Image, level: Level) -> FeatureMap:
        if img.name is None:
            raise ContractError("import extractor needs images with a source name")
        path = self.path_for(img.name, level)
        if not path.exists():
            raise FormatError(f"missing feature map file: {path}")
        return _check_grid(read_feature_map(path), img)


def extract_features(extractor, img: Image, level: Level) -> FeatureMap:
    """Run an extractor and enforce the grid/stride invariants."""
    fm = extractor.extract(img, level)
    if fm.level is not level:
        raise ContractError(f"extractor returned {fm.level} for requested {level}")
    return _check_grid(fm, img)
