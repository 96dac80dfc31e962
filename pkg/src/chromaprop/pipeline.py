"""End-to-end sequence propagation and the Lab-PSNR evaluation protocol.

FULL mode chains both strategies frame by frame: the previous *fused* output
is warped forward, the reference is matched globally, and the fusion net
combines them. The ablation modes run one strategy alone, with the gray
frame swapped in as luminance so all modes are compared on equal footing.
Frame 1 is always the reference passed through; evaluation reports it at the
PSNR cap and excludes it from the N-frame averages.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .colorspace import (PSNR_CAP_DB, Image, Space, psnr_lab, rgb_to_yuv,
                         yuv_to_rgb)
from .errors import ContractError
from .features import Level, extract_features
from .fusion import FusionNet, fuse
from .matching import match_coarse, match_fine, transfer_colors
from .tensor import no_grad
from .warp import WarpNet, apply_separable_kernels, predict_kernels

AVERAGE_WINDOWS = (10, 20, 30, 40, 50)


class Mode(Enum):
    FULL = "full"
    LOCAL_ONLY = "local"
    GLOBAL_ONLY = "global"


@dataclass
class PropagationRun:
    grays: list[Image]
    reference: Image
    warp_net: WarpNet | None = None
    fusion_net: FusionNet | None = None
    extractor: object | None = None
    roi_margin: int = 1
    outputs: list[Image] = field(default_factory=list)
    timings: list[dict[str, float]] = field(default_factory=list)


def replace_luma(rgb: Image, gray: Image) -> Image:
    """Swap the luminance channel for the gray frame, keeping chroma."""
    yuv = rgb_to_yuv(rgb).data.copy()
    yuv[:, :, 0] = gray.data[:, :, 0]
    return yuv_to_rgb(Image(yuv, Space.YUV))


def propagate(run: PropagationRun, mode: Mode) -> list[Image]:
    """Color the gray sequence; fills run.outputs and per-frame timings."""
    if not run.grays:
        raise ContractError("no frames to propagate")
    for g in run.grays:
        if g.space is not Space.GRAY:
            raise ContractError("propagation frames must be GRAY")
        if g.data.shape[:2] != run.grays[0].data.shape[:2]:
            raise ContractError("all frames must share dimensions")
    if run.reference.space is not Space.RGB:
        raise ContractError("reference must be RGB")
    if run.reference.data.shape[:2] != run.grays[0].data.shape[:2]:
        raise ContractError("reference dimensions must match the frames")
    needs_warp = mode in (Mode.FULL, Mode.LOCAL_ONLY)
    needs_global = mode in (Mode.FULL, Mode.GLOBAL_ONLY)
    if needs_warp and run.warp_net is None:
        raise ContractError(f"{mode.value} mode needs a warp checkpoint")
    if mode is Mode.FULL and run.fusion_net is None:
        raise ContractError("full mode needs a fusion checkpoint")
    if needs_global and run.extractor is None:
        raise ContractError(f"{mode.value} mode needs a feature extractor")

    run.outputs = [run.reference]
    run.timings = [{"warp": 0.0, "match": 0.0, "fuse": 0.0}]
    if needs_global:
        ref_gray = run.grays[0]
        ref_coarse = extract_features(run.extractor, ref_gray, Level.COARSE)
        ref_fine = extract_features(run.extractor, ref_gray, Level.FINE)

    with no_grad():
        for k in range(1, len(run.grays)):
            gk = run.grays[k]
            timing = {"warp": 0.0, "match": 0.0, "fuse": 0.0}

            warped = None
            if needs_warp:
                t0 = time.perf_counter()
                kf = predict_kernels(run.warp_net, run.grays[k - 1], gk)
                warped = apply_separable_kernels(run.outputs[k - 1], kf)
                timing["warp"] = time.perf_counter() - t0

            matched = None
            if needs_global:
                t0 = time.perf_counter()
                coarse = match_coarse(
                    extract_features(run.extractor, gk, Level.COARSE), ref_coarse)
                fine = match_fine(
                    extract_features(run.extractor, gk, Level.FINE), ref_fine,
                    coarse, run.roi_margin)
                matched = transfer_colors(run.reference, fine)
                timing["match"] = time.perf_counter() - t0

            if mode is Mode.FULL:
                t0 = time.perf_counter()
                out = fuse(run.fusion_net, gk, warped, matched)
                timing["fuse"] = time.perf_counter() - t0
            elif mode is Mode.LOCAL_ONLY:
                out = replace_luma(warped, gk)
            else:
                out = replace_luma(matched, gk)
            run.outputs.append(out)
            run.timings.append(timing)
    return run.outputs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    label: str
    per_frame: list[float]
    averages: dict[int, float]

    def recompute_averages(self) -> dict[int, float]:
        return _n_frame_averages(self.per_frame)


def _n_frame_averages(per_frame: list[float]) -> dict[int, float]:
    # frame 1 is the reference: reported at cap, excluded from averages
    out = {}
    for n in AVERAGE_WINDOWS:
        window = per_frame[1:n]
        out[n] = float(np.mean(window)) if window else float("nan")
    return out


def evaluate(pred: list[Image], gt: list[Image], label: str = "") -> EvalReport:
    """Per-frame Lab PSNR plus averages over the first N frames."""
    if len(pred) != len(gt):
        raise ContractError(f"sequence length mismatch: {len(pred)} vs {len(gt)}")
    per_frame = [psnr_lab(p, g) for p, g in zip(pred, gt)]
    if per_frame:
        per_frame[0] = PSNR_CAP_DB
    return EvalReport(label, per_frame, _n_frame_averages(per_frame))


def combine_reports(reports: list[EvalReport], label: str = "") -> EvalReport:
    """Average per-frame curves across sequences (truncated to the shortest)."""
    if not reports:
        raise ContractError("no reports to combine")
    n = min(len(r.per_frame) for r in reports)
    curve = [float(np.mean([r.per_frame[i] for r in reports])) for i in range(n)]
    return EvalReport(label or reports[0].label, curve, _n_frame_averages(curve))


def write_frames_csv(report: EvalReport, path: str | Path) -> None:
    lines = ["frame,psnr"]
    lines += [f"{i},{v!r}" for i, v in enumerate(report.per_frame, start=1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary_csv(report: EvalReport, path: str | Path) -> None:
    lines = ["N,psnr"]
    lines += [f"{n},{report.averages[n]!r}" for n in AVERAGE_WINDOWS]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def smoothed(curve: list[float], window: int = 3) -> list[float]:
    """Centered moving average used for temporal-shape comparisons."""
    if window < 1 or window % 2 == 0:
        raise ContractError("window must be odd and positive")
    half = window // 2
    out = []
    for i in range(len(curve)):
        lo = max(0, i - half)
        hi = min(len(curve), i + half + 1)
        out.append(float(np.mean(curve[lo:hi])))
    return out
