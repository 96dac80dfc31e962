"""Frame I/O and training-sequence ingestion.

A dataset root holds one subdirectory per sequence, each containing
zero-padded, numbered PNG frames (auxiliary files such as masks live in
nested subdirectories and are ignored). Frames are cached in memory both as
RGB and as derived gray; source files are never written to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .colorspace import Image, Space, rgb_to_gray
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 256
PAD_MULTIPLE = 16  # warp-net total downsampling factor


def load_image(path: str | Path) -> Image:
    path = Path(path)
    try:
        with PILImage.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return Image(rgb, Space.RGB, name=path.stem)


def save_image(path: str | Path, img: Image) -> None:
    if img.space not in (Space.RGB, Space.GRAY):
        raise ContractError(f"can only save RGB or GRAY images, got {img.space.name}")
    arr = np.clip(img.data, 0.0, 1.0)
    quantized = np.round(arr * 255.0).astype(np.uint8)
    if img.space is Space.GRAY:
        PILImage.fromarray(quantized[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(quantized, mode="RGB").save(path)


def load_frame_dir(directory: str | Path) -> list[Image]:
    """Load the PNG frames directly inside a directory, sorted by filename."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix == ".png")
    if not paths:
        raise FormatError(f"no PNG frames in {directory}")
    return [load_image(p) for p in paths]


@dataclass
class SequenceRecord:
    name: str
    paths: list[Path]
    rgb: list[Image]
    gray: list[Image]

    @property
    def frame_count(self) -> int:
        return len(self.rgb)

    @property
    def pair_count(self) -> int:
        return len(self.rgb) - 1


@dataclass
class SequenceDataset:
    sequences: list[SequenceRecord]
    patch_size: int = DEFAULT_PATCH_SIZE
    seed: int = 0
    # flattened (sequence index, current-frame index) pairs; uniform sampling
    # over this list weights each sequence by its pair count
    pair_index: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pair_index:
            self.pair_index = [(s, k) for s, seq in enumerate(self.sequences)
                               for k in range(1, seq.frame_count)]

    @property
    def total_pairs(self) -> int:
        return len(self.pair_index)


def load_dataset(root: str | Path, patch_size: int = DEFAULT_PATCH_SIZE,
                 seed: int = 0) -> SequenceDataset:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset root not found: {root}")
    sequences = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = sorted(p for p in seq_dir.iterdir() if p.is_file() and p.suffix == ".png")
        if not paths:
            continue
        if len(paths) < 2:
            raise FormatError(f"sequence {seq_dir.name!r} has a single frame; need >= 2")
        rgb = [load_image(p) for p in paths]
        dims = {im.data.shape for im in rgb}
        if len(dims) > 1:
            raise FormatError(f"sequence {seq_dir.name!r} mixes frame dimensions: {sorted(dims)}")
        gray = [rgb_to_gray(im) for im in rgb]
        sequences.append(SequenceRecord(seq_dir.name, paths, rgb, gray))
    if not sequences:
        log.warning("dataset root %s contains no sequences", root)
    return SequenceDataset(sequences, patch_size=patch_size, seed=seed)


@dataclass
class PatchPair:
    i_prev: np.ndarray  # (P,P,3)
    i_cur: np.ndarray
    g_prev: np.ndarray  # (P,P,1)
    g_cur: np.ndarray
    padded: bool


def _pad_to_multiple(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    h, w = arr.shape[:2]
    pb = (-h) % PAD_MULTIPLE
    pr = (-w) % PAD_MULTIPLE
    if pb == 0 and pr == 0:
        return arr, False
    return np.pad(arr, ((0, pb), (0, pr), (0, 0)), mode="edge"), True


def sample_patch_pair(ds: SequenceDataset, rng: np.random.Generator) -> PatchPair:
    """Draw co-located crops from two consecutive frames of one sequence.

    Pairs are drawn uniformly over the dataset's pair index. Frames smaller
    than the patch size are returned whole, replicate-padded up to the
    network's downsampling multiple and flagged.
    """
    if ds.total_pairs == 0:
        raise ContractError("cannot sample from an empty dataset")
    s, k = ds.pair_index[int(rng.integers(ds.total_pairs))]
    seq = ds.sequences[s]
    h, w = seq.rgb[0].data.shape[:2]
    p = ds.patch_size
    if h >= p and w >= p:
        y0 = int(rng.integers(h - p + 1))
        x0 = int(rng.integers(w - p + 1))
        sl = (slice(y0, y0 + p), slice(x0, x0 + p))
        padded = False
        crop = lambda img: img.data[sl]
    else:
        padded = True
        crop = lambda img: img.data
    i_prev, flag_a = _pad_to_multiple(crop(seq.rgb[k - 1]))
    i_cur, _ = _pad_to_multiple(crop(seq.rgb[k]))
    g_prev, _ = _pad_to_multiple(crop(seq.gray[k - 1]))
    g_cur, _ = _pad_to_multiple(crop(seq.gray[k]))
    return PatchPair(i_prev, i_cur, g_prev, g_cur, padded=padded or flag_a)
