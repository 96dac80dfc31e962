"""Two-stage training: warp kernels first, then fusion on cached intermediates.

Stage one minimizes the warp objective (mean absolute error of the kernel-
warped previous frame against the current frame). Stage two first freezes
the warp net, precomputes the warped and globally matched estimates for
every training pair into a cache, and then trains the fusion net to predict
the current frame's chroma from those two estimates plus the gray frame.
A manifest ties the cache to the exact warp checkpoint that produced it;
fusion training refuses a cache whose entries no longer hash to the
manifest's records. An optional joint mode keeps optimizing the warp
parameters through the fused objective; it is off by default.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .colorspace import Image, Space, psnr_lab, rgb_to_yuv
from .data import PatchPair, SequenceDataset, sample_patch_pair
from .errors import ContractError, FormatError, NumericError
from .features import Level, extract_features
from .fusion import FusionNet, build_fusion_stack, chroma_loss, fuse
from .matching import match_coarse, match_fine, transfer_colors
from .optim import (OptimizerState, ParameterSet, adam_step, checkpoint_hash,
                    load_checkpoint, save_checkpoint)
from .tensor import Tensor, backward, l1_loss, no_grad
from .warp import WarpNet, apply_separable_kernels, predict_kernels, separable_warp

log = logging.getLogger(__name__)

INTERMEDIATE_MAGIC = b"IPAIR"
INTERMEDIATE_VERSION = 1
KIND_WARPED = 0
KIND_MATCHED = 1
MANIFEST_NAME = "manifest"


class Stage(Enum):
    WARP = "warp"
    FUSION = "fusion"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 12
    patch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    stage: Stage = Stage.WARP
    kernel_size: int = 21
    held_out_fraction: float = 0.10
    joint: bool = False
    steps_per_epoch: int = 0  # 0 derives ceil(pairs / batch) from the dataset

    def validate(self) -> None:
        if min(self.batch_size, self.epochs, self.patch_size) < 1:
            raise ContractError("batch size, epochs and patch size must be positive")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.patch_size < 16:
            raise ContractError("patch size must cover the downsampling factor (>= 16)")
        if not 0.0 <= self.held_out_fraction < 1.0:
            raise ContractError("held_out_fraction must be in [0, 1)")
        if self.kernel_size % 2 == 0 or self.kernel_size < 3:
            raise ContractError("kernel_size must be odd and >= 3")
        if self.steps_per_epoch < 0:
            raise ContractError("steps_per_epoch must be >= 0")


@dataclass
class TrainResult:
    checkpoint: Path
    loss_curve: list[float]
    val_psnr: list[float] = field(default_factory=list)
    warped_psnr: float | None = None
    matched_psnr: float | None = None


def _write_curve(path: Path, loss: list[float], val: list[float] | None = None) -> None:
    lines = ["epoch,loss" + (",val_psnr" if val else "")]
    for i, value in enumerate(loss, start=1):
        row = f"{i},{value!r}"
        if val:
            row += f",{val[i - 1]!r}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _stack_batch(batch: list[PatchPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shapes = {p.i_prev.shape for p in batch}
    if len(shapes) > 1:
        raise ContractError(
            f"batch mixes patch shapes {sorted(shapes)}; use a patch size all frames cover")
    pair = np.stack([np.concatenate([p.g_prev, p.g_cur], axis=2) for p in batch])
    prev = np.stack([p.i_prev for p in batch])
    cur = np.stack([p.i_cur for p in batch])
    return pair.astype(np.float32), prev.astype(np.float32), cur.astype(np.float32)


def _derive_steps(cfg: TrainConfig, pair_count: int) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(pair_count / cfg.batch_size))


# ---------------------------------------------------------------------------
# stage one: warp
# ---------------------------------------------------------------------------

def train_warp_stage(ds: SequenceDataset, cfg: TrainConfig, out_path: str | Path) -> TrainResult:
    cfg.validate()
    if cfg.stage is not Stage.WARP:
        raise ContractError("train_warp_stage requires cfg.stage == WARP")
    if ds.total_pairs == 0:
        raise ContractError("dataset has no frame pairs")
    out_path = Path(out_path)
    rng = np.random.default_rng(cfg.seed)
    net = WarpNet(cfg.kernel_size, rng=np.random.default_rng(cfg.seed + 1))
    state = OptimizerState(learning_rate=cfg.learning_rate)
    steps = _derive_steps(cfg, ds.total_pairs)

    curve: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            batch = [sample_patch_pair(ds, rng) for _ in range(cfg.batch_size)]
            pair, prev, cur = _stack_batch(batch)
            kv, kh = net.forward(Tensor(pair))
            warped = separable_warp(Tensor(prev), kv, kh)
            loss = l1_loss(warped, Tensor(cur))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite warp loss at epoch {epoch}; last good checkpoint: "
                    f"{out_path if curve else 'none written yet'}")
            net.params.zero_grads()
            backward(loss)
            adam_step(net.params, state)
            losses.append(value)
        curve.append(float(np.mean(losses)))
        save_checkpoint(out_path, net.params)
        log.info("warp epoch %d/%d loss %.5f", epoch, cfg.epochs, curve[-1])
    _write_curve(out_path.with_suffix(out_path.suffix + ".curve.csv"), curve)
    return TrainResult(out_path, curve)


def load_warp_net(path: str | Path, dtype=np.float32) -> WarpNet:
    arrays = load_checkpoint(path)
    head = arrays.get("warp.head_v.w")
    if head is None:
        raise FormatError(f"{path}: not a warp checkpoint (missing kernel head)")
    net = WarpNet(kernel_size=head.shape[3], dtype=dtype)
    net.params.load_arrays(arrays)
    return net


def load_fusion_net(path: str | Path, dtype=np.float32) -> FusionNet:
    arrays = load_checkpoint(path)
    first = arrays.get("fusion.conv1.w")
    if first is None:
        raise FormatError(f"{path}: not a fusion checkpoint")
    net = FusionNet(channels=first.shape[3], dtype=dtype)
    net.params.load_arrays(arrays)
    return net


# ---------------------------------------------------------------------------
# intermediate cache
# ---------------------------------------------------------------------------

def write_intermediate(path: str | Path, arr: np.ndarray, kind: int) -> None:
    h, w, c = arr.shape
    header = INTERMEDIATE_MAGIC + struct.pack("<IBIIII", INTERMEDIATE_VERSION, kind, h, w, c, 1)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_intermediate(path: str | Path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:5] != INTERMEDIATE_MAGIC:
        raise FormatError(f"{path}: bad intermediate magic {blob[:5]!r}")
    version, kind, h, w, c, stride = struct.unpack_from("<IBIIII", blob, 5)
    if version != INTERMEDIATE_VERSION or stride != 1:
        raise FormatError(f"{path}: unsupported intermediate header")
    offset = 5 + struct.calcsize("<IBIIII")
    count = h * w * c
    if len(blob) != offset + 4 * count:
        raise FormatError(f"{path}: payload size does not match header")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(h, w, c)
    return data.copy(), kind


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_manifest(cache_dir: Path) -> dict:
    path = cache_dir / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"cache manifest not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest: {exc}") from exc


@dataclass
class PrecomputeResult:
    computed: int
    skipped: int
    manifest_path: Path


def precompute_intermediates(ds: SequenceDataset, warp_ckpt: str | Path, extractor,
                             cache_dir: str | Path, seed: int | None = None,
                             roi_margin: int = 1) -> PrecomputeResult:
    """Cache the warped and matched estimate for every consecutive pair.

    Idempotent: an entry whose file already hashes to the manifest's record
    is skipped; corrupt or missing entries are recomputed. A manifest records
    the producing warp checkpoint's hash and the extractor tag.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    net = load_warp_net(warp_ckpt)
    whash = checkpoint_hash(warp_ckpt)

    entries: dict[str, str] = {}
    manifest_path = cache_dir / MANIFEST_NAME
    if manifest_path.exists():
        try:
            old = _load_manifest(cache_dir)
        except FormatError:
            old = {}
        if old.get("warp_checkpoint_hash") == whash and old.get("extractor") == extractor.tag:
            entries = dict(old.get("entries", {}))

    computed = skipped = 0

    def ensure(relpath: str, producer) -> None:
        nonlocal computed, skipped
        path = cache_dir / relpath
        if path.exists() and entries.get(relpath) == _sha256(path):
            skipped += 1
            return
        arr, kind = producer()
        path.parent.mkdir(parents=True, exist_ok=True)
        write_intermediate(path, arr, kind)
        entries[relpath] = _sha256(path)
        computed += 1

    with no_grad():
        for seq in ds.sequences:
            ref_gray, ref_rgb = seq.gray[0], seq.rgb[0]
            ref_coarse = extract_features(extractor, ref_gray, Level.COARSE)
            ref_fine = extract_features(extractor, ref_gray, Level.FINE)
            for c in range(1, seq.frame_count):
                frame_no = c + 1

                def make_warped(c=c):
                    kf = predict_kernels(net, seq.gray[c - 1], seq.gray[c])
                    return apply_separable_kernels(seq.rgb[c - 1], kf).data, KIND_WARPED

                def make_matched(c=c):
                    coarse = match_coarse(
                        extract_features(extractor, seq.gray[c], Level.COARSE), ref_coarse)
                    fine = match_fine(
                        extract_features(extractor, seq.gray[c], Level.FINE), ref_fine,
                        coarse, roi_margin)
                    return transfer_colors(ref_rgb, fine).data, KIND_MATCHED

                ensure(f"{seq.name}/{frame_no:04d}.iw", make_warped)
                ensure(f"{seq.name}/{frame_no:04d}.is", make_matched)

    manifest = {"version": 1, "warp_checkpoint_hash": whash, "extractor": extractor.tag,
                "seed": seed, "entries": entries}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return PrecomputeResult(computed, skipped, manifest_path)


# ---------------------------------------------------------------------------
# stage two: fusion
# ---------------------------------------------------------------------------

def _verify_cache(ds: SequenceDataset, cache_dir: Path,
                  expected_warp_hash: str | None) -> dict:
    manifest = _load_manifest(cache_dir)
    if expected_warp_hash is not None and manifest.get("warp_checkpoint_hash") != expected_warp_hash:
        raise FormatError(
            "cache was produced by a different warp checkpoint than the one supplied")
    entries = manifest.get("entries", {})
    for seq in ds.sequences:
        for c in range(1, seq.frame_count):
            for ext in ("iw", "is"):
                rel = f"{seq.name}/{c + 1:04d}.{ext}"
                path = cache_dir / rel
                if rel not in entries or not path.exists():
                    raise FormatError(f"missing cache entry for pair {rel}")
                if _sha256(path) != entries[rel]:
                    raise FormatError(
                        f"cache entry {rel} does not match the manifest (stale or corrupt)")
    return manifest


def _split_sequences(ds: SequenceDataset, cfg: TrainConfig) -> tuple[set[int], set[int]]:
    n = len(ds.sequences)
    order = np.random.default_rng(cfg.seed).permutation(n)
    val_count = max(1, round(cfg.held_out_fraction * n)) if n > 1 and cfg.held_out_fraction > 0 else 0
    val = set(int(i) for i in order[:val_count])
    train = set(range(n)) - val
    return train, val


def train_fusion_stage(ds: SequenceDataset, cache_dir: str | Path, cfg: TrainConfig,
                       out_path: str | Path, warp_ckpt: str | Path | None = None) -> TrainResult:
    cfg.validate()
    if cfg.stage is not Stage.FUSION:
        raise ContractError("train_fusion_stage requires cfg.stage == FUSION")
    if cfg.joint and warp_ckpt is None:
        raise ContractError("joint fine-tuning needs the warp checkpoint")
    cache_dir = Path(cache_dir)
    out_path = Path(out_path)
    expected = checkpoint_hash(warp_ckpt) if warp_ckpt is not None else None
    _verify_cache(ds, cache_dir, expected)

    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for s, seq in enumerate(ds.sequences):
        for c in range(1, seq.frame_count):
            iw, kind_w = read_intermediate(cache_dir / f"{seq.name}/{c + 1:04d}.iw")
            ims, kind_m = read_intermediate(cache_dir / f"{seq.name}/{c + 1:04d}.is")
            if kind_w != KIND_WARPED or kind_m != KIND_MATCHED:
                raise FormatError(f"cache kinds swapped for {seq.name}/{c + 1:04d}")
            if iw.shape != seq.rgb[c].data.shape or ims.shape != seq.rgb[c].data.shape:
                raise FormatError(f"cache entry shape mismatch for {seq.name}/{c + 1:04d}")
            cache[(s, c)] = (iw, ims)

    train_seqs, val_seqs = _split_sequences(ds, cfg)
    train_pairs = [(s, c) for (s, c) in ds.pair_index if s in train_seqs]
    val_pairs = [(s, c) for (s, c) in ds.pair_index if s in val_seqs]
    if not train_pairs:
        raise ContractError("no training pairs left after the held-out split")

    warp_net = load_warp_net(warp_ckpt) if cfg.joint else None
    net = FusionNet(rng=np.random.default_rng(cfg.seed + 2))
    params = net.params
    if cfg.joint:
        merged = ParameterSet()
        for name, t in list(net.params.items()) + list(warp_net.params.items()):
            merged.add(name, t)
        params = merged
    state = OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 3)
    steps = _derive_steps(cfg, len(train_pairs))

    def crop_window(shape_hw):
        h, w = shape_hw
        p = cfg.patch_size
        if h >= p and w >= p:
            y0 = int(rng.integers(h - p + 1))
            x0 = int(rng.integers(w - p + 1))
            return slice(y0, y0 + p), slice(x0, x0 + p)
        return slice(0, h), slice(0, w)

    def validation_psnr() -> float:
        scores = []
        with no_grad():
            for s, c in val_pairs:
                seq = ds.sequences[s]
                iw, ims = cache[(s, c)]
                fused = fuse(net, seq.gray[c], Image(iw, Space.RGB), Image(ims, Space.RGB))
                scores.append(psnr_lab(fused, seq.rgb[c]))
        return float(np.mean(scores)) if scores else float("nan")

    def intermediate_psnr() -> tuple[float, float]:
        ws, ms = [], []
        for s, c in (val_pairs or train_pairs):
            seq = ds.sequences[s]
            iw, ims = cache[(s, c)]
            ws.append(psnr_lab(Image(iw, Space.RGB), seq.rgb[c]))
            ms.append(psnr_lab(Image(ims, Space.RGB), seq.rgb[c]))
        return float(np.mean(ws)), float(np.mean(ms))

    curve: list[float] = []
    val_curve: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            picks = [train_pairs[int(i)] for i in rng.integers(len(train_pairs), size=cfg.batch_size)]
            gks, iws, imss, tuvs, pairs_g, prevs, curs = [], [], [], [], [], [], []
            for s, c in picks:
                seq = ds.sequences[s]
                ys, xs = crop_window(seq.rgb[c].data.shape[:2])
                iw, ims = cache[(s, c)]
                gks.append(seq.gray[c].data[ys, xs])
                iws.append(iw[ys, xs])
                imss.append(ims[ys, xs])
                tuvs.append(rgb_to_yuv(seq.rgb[c]).data[ys, xs, 1:])
                if cfg.joint:
                    pairs_g.append(np.concatenate(
                        [seq.gray[c - 1].data[ys, xs], seq.gray[c].data[ys, xs]], axis=2))
                    prevs.append(seq.rgb[c - 1].data[ys, xs])
                    curs.append(seq.rgb[c].data[ys, xs])
            gk_t = Tensor(np.stack(gks).astype(np.float32))
            ims_t = Tensor(np.stack(imss).astype(np.float32))
            tuv_t = Tensor(np.stack(tuvs).astype(np.float32))
            if cfg.joint:
                kv, kh = warp_net.forward(Tensor(np.stack(pairs_g).astype(np.float32)))
                iw_t = separable_warp(Tensor(np.stack(prevs).astype(np.float32)), kv, kh)
                warp_term = l1_loss(iw_t, Tensor(np.stack(curs).astype(np.float32)))
            else:
                iw_t = Tensor(np.stack(iws).astype(np.float32))
                warp_term = None
            uv = net.forward_chroma(build_fusion_stack(gk_t, iw_t, ims_t))
            loss = chroma_loss(uv, tuv_t)
            if warp_term is not None:
                loss = loss + warp_term
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite fusion loss at epoch {epoch}; last good checkpoint: "
                    f"{out_path if curve else 'none written yet'}")
            params.zero_grads()
            backward(loss)
            adam_step(params, state)
            losses.append(value)
        curve.append(float(np.mean(losses)))
        val_curve.append(validation_psnr())
        save_checkpoint(out_path, net.params)
        log.info("fusion epoch %d/%d loss %.5f val %.2f dB",
                 epoch, cfg.epochs, curve[-1], val_curve[-1])
    if cfg.joint and warp_ckpt is not None:
        save_checkpoint(Path(str(out_path) + ".warp-joint"), warp_net.params)
    warped_psnr, matched_psnr = intermediate_psnr()
    _write_curve(out_path.with_suffix(out_path.suffix + ".curve.csv"), curve, val_curve)
    return TrainResult(out_path, curve, val_curve, warped_psnr, matched_psnr)
