"""Coarse-to-fine correspondence search and reference color gathering.

Coarse matching scans the whole reference grid for each target cell; the
winning cell defines a region of interest (its fine-pixel footprint dilated
by a margin of coarse cells) that every fine pixel of the target cell then
searches exhaustively. Distances are squared Euclidean on descriptors,
compared in float64, with ties broken toward the smallest raster index, so
two runs on identical inputs always produce identical fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colorspace import Image, Space
from .errors import ContractError
from .features import FeatureMap, Level, extract_features

DEFAULT_ROI_MARGIN = 1


@dataclass
class CorrespondenceField:
    """Per-cell (or per-pixel) source coordinates into the reference grid.

    `cell_stride` records the grid stride in fine pixels when the field lives
    on a coarse grid; pixel-level fields carry 1.
    """

    src_y: np.ndarray
    src_x: np.ndarray
    cost: np.ndarray | None = None
    cell_stride: int = 1

    def __post_init__(self):
        if self.src_y.shape != self.src_x.shape:
            raise ContractError("src_y/src_x shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.src_y.shape

    def check_bounds(self, height: int, width: int) -> None:
        if (self.src_y.min() < 0 or self.src_y.max() >= height
                or self.src_x.min() < 0 or self.src_x.max() >= width):
            raise ContractError(
                f"correspondence coordinates fall outside the {height}x{width} reference")


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of a (M,D) and b (K,D), float64 exact form."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def match_coarse(fk: FeatureMap, f1: FeatureMap) -> CorrespondenceField:
    """Globally match every coarse cell of fk to its best cell in f1."""
    if fk.level is not Level.COARSE or f1.level is not Level.COARSE:
        raise ContractError("match_coarse expects COARSE maps")
    if fk.depth != f1.depth:
        raise ContractError(f"descriptor depth mismatch: {fk.depth} vs {f1.depth}")
    hk, wk = fk.grid_shape()
    h1, w1 = f1.grid_shape()
    a = fk.data.reshape(-1, fk.depth).astype(np.float64)
    b = f1.data.reshape(-1, f1.depth).astype(np.float64)
    d = _pairwise_sq(a, b)
    best = d.argmin(axis=1)  # first occurrence = smallest raster index
    cost = d[np.arange(d.shape[0]), best].reshape(hk, wk)
    return CorrespondenceField((best // w1).reshape(hk, wk).astype(np.int32),
                               (best % w1).reshape(hk, wk).astype(np.int32), cost,
                               cell_stride=fk.stride)


def match_fine(fk: FeatureMap, f1: FeatureMap, coarse: CorrespondenceField,
               roi_margin: int = DEFAULT_ROI_MARGIN) -> CorrespondenceField:
    """Per-pixel match restricted to the ROI named by each coarse correspondence.

    All fine pixels under one target coarse cell share the ROI: the matched
    reference cell's footprint dilated by roi_margin coarse cells per side.
    """
    if fk.level is not Level.FINE or f1.level is not Level.FINE:
        raise ContractError("match_fine expects FINE maps")
    if fk.depth != f1.depth:
        raise ContractError(f"descriptor depth mismatch: {fk.depth} vs {f1.depth}")
    if roi_margin < 0:
        raise ContractError("roi_margin must be >= 0")
    hk, wk = fk.grid_shape()
    h1, w1 = f1.grid_shape()
    ch, cw = coarse.shape
    r = coarse.cell_stride  # fine pixels per coarse cell on both grids
    if (ch - 1) * r >= hk or (cw - 1) * r >= wk:
        raise ContractError("coarse grid does not tile the fine grid at its stride")

    src_y = np.empty((hk, wk), dtype=np.int32)
    src_x = np.empty((hk, wk), dtype=np.int32)
    cost = np.empty((hk, wk), dtype=np.float64)
    target = fk.data.astype(np.float64)
    reference = f1.data.astype(np.float64)

    for cy in range(ch):
        by0, by1 = cy * r, min((cy + 1) * r, hk)
        for cx in range(cw):
            bx0, bx1 = cx * r, min((cx + 1) * r, wk)
            my = int(coarse.src_y[cy, cx])
            mx = int(coarse.src_x[cy, cx])
            ry0 = max(0, (my - roi_margin) * r)
            ry1 = min(h1, (my + 1 + roi_margin) * r)
            rx0 = max(0, (mx - roi_margin) * r)
            rx1 = min(w1, (mx + 1 + roi_margin) * r)
            block = target[by0:by1, bx0:bx1].reshape(-1, fk.depth)
            roi = reference[ry0:ry1, rx0:rx1].reshape(-1, f1.depth)
            d = _pairwise_sq(block, roi)
            best = d.argmin(axis=1)
            roi_w = rx1 - rx0
            bh, bw = by1 - by0, bx1 - bx0
            src_y[by0:by1, bx0:bx1] = (ry0 + best // roi_w).reshape(bh, bw)
            src_x[by0:by1, bx0:bx1] = (rx0 + best % roi_w).reshape(bh, bw)
            cost[by0:by1, bx0:bx1] = d[np.arange(d.shape[0]), best].reshape(bh, bw)
    field = CorrespondenceField(src_y, src_x, cost)
    field.check_bounds(h1, w1)
    return field


def match_fine_global(fk: FeatureMap, f1: FeatureMap) -> CorrespondenceField:
    """Exhaustive whole-reference fine matching (single-cell ROI covering it all)."""
    hk, wk = fk.grid_shape()
    h1, w1 = f1.grid_shape()
    trivial = CorrespondenceField(np.zeros((1, 1), dtype=np.int32),
                                  np.zeros((1, 1), dtype=np.int32),
                                  cell_stride=max(hk, wk))
    return match_fine(fk, f1, trivial, roi_margin=max(h1, w1))


def transfer_colors(ref: Image, field: CorrespondenceField) -> Image:
    """Gather reference colors: out(x) = ref(field(x))."""
    if ref.space is not Space.RGB:
        raise ContractError("transfer_colors expects an RGB reference")
    field.check_bounds(ref.height, ref.width)
    return Image(ref.data[field.src_y, field.src_x], Space.RGB)


def global_transfer(extractor, g1: Image, i1: Image, gk: Image,
                    roi_margin: int = DEFAULT_ROI_MARGIN) -> Image:
    """Full reference-to-frame color transfer: extract, match, gather."""
    if g1.data.shape[:2] != i1.data.shape[:2]:
        raise ContractError("reference gray/color dimensions differ")
    coarse = match_coarse(extract_features(extractor, gk, Level.COARSE),
                          extract_features(extractor, g1, Level.COARSE))
    fine = match_fine(extract_features(extractor, gk, Level.FINE),
                      extract_features(extractor, g1, Level.FINE),
                      coarse, roi_margin)
    return transfer_colors(i1, fine)
