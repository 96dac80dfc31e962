"""Command-line entry points.

Subcommands: gen-benchmark, train, precompute, propagate, evaluate.
Config files are line-oriented `key = value` UTF-8 ('#' starts a comment);
unknown keys are rejected. Exit codes: 0 success, 2 usage, 3 data/format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .colorspace import Image, Space, rgb_to_gray
from .data import load_dataset, load_frame_dir, load_image, save_image
from .errors import ContractError, FormatError, NumericError
from .features import BuiltinExtractor, ImportExtractor
from .pipeline import (Mode, PropagationRun, combine_reports, evaluate,
                       propagate, write_frames_csv, write_summary_csv)
from .synth import BenchmarkSpec, gen_benchmark
from .train import (Stage, TrainConfig, load_fusion_net, load_warp_net,
                    precompute_intermediates, train_fusion_stage,
                    train_warp_stage)

log = logging.getLogger(__name__)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        fields[key.strip()] = value.strip()
    return fields


def _coerce(value: str, target_type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value)


def _apply_fields(obj, fields: dict[str, str], source: str):
    """Fill dataclass fields from parsed strings, rejecting unknown keys."""
    known = {f.name: f.type for f in dataclasses.fields(obj)}
    types = {f.name: type(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    unknown = sorted(set(fields) - set(known))
    if unknown:
        raise FormatError(f"{source}: unknown keys: {', '.join(unknown)}")
    for key, value in fields.items():
        try:
            setattr(obj, key, _coerce(value, types[key]))
        except ValueError as exc:
            raise FormatError(f"{source}: bad value for {key}: {exc}") from exc
    return obj


def load_train_config(path: str | Path, stage: Stage) -> TrainConfig:
    fields = parse_kv_file(path)
    fields.pop("stage", None)  # the --stage flag owns this
    cfg = _apply_fields(TrainConfig(), fields, str(path))
    cfg.stage = stage
    cfg.validate()
    return cfg


def load_benchmark_spec(path: str | Path) -> BenchmarkSpec:
    spec = _apply_fields(BenchmarkSpec(), parse_kv_file(path), str(path))
    spec.validate()
    return spec


def make_extractor(spec: str, coarse_ratio: int):
    if spec == "builtin":
        return BuiltinExtractor(coarse_ratio=coarse_ratio)
    if spec.startswith("import:"):
        return ImportExtractor(spec.split(":", 1)[1])
    raise FormatError(f"unknown extractor {spec!r}; use 'builtin' or 'import:PATH'")


def _load_gray_sequence(directory: str | Path) -> list[Image]:
    frames = load_frame_dir(directory)
    return [rgb_to_gray(f) for f in frames]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_benchmark(args) -> int:
    spec = load_benchmark_spec(args.spec) if args.spec else BenchmarkSpec()
    if spec and args.spec is None:
        spec.validate()
    names = gen_benchmark(spec, args.seed, args.out)
    print(f"wrote {len(names)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    stage = Stage(args.stage)
    cfg = load_train_config(args.config, stage) if args.config else TrainConfig(stage=stage)
    ds = load_dataset(args.data, patch_size=cfg.patch_size, seed=cfg.seed)
    if stage is Stage.WARP:
        result = train_warp_stage(ds, cfg, args.out)
    else:
        if not args.cache:
            raise ContractError("fusion training needs --cache")
        result = train_fusion_stage(ds, args.cache, cfg, args.out,
                                    warp_ckpt=args.warp_ckpt)
    print(f"final loss {result.loss_curve[-1]!r}; checkpoint at {result.checkpoint}")
    if result.val_psnr:
        print(f"validation psnr {result.val_psnr[-1]!r} dB "
              f"(warped {result.warped_psnr!r}, matched {result.matched_psnr!r})")
    return 0


def cmd_precompute(args) -> int:
    ds = load_dataset(args.data)
    extractor = make_extractor(args.extractor, args.coarse_ratio)
    result = precompute_intermediates(ds, args.warp_ckpt, extractor, args.cache,
                                      roi_margin=args.roi_margin)
    print(f"computed {result.computed}, skipped {result.skipped} cache entries")
    return 0


def cmd_propagate(args) -> int:
    grays = _load_gray_sequence(args.gray)
    frames = load_frame_dir(args.gray)
    reference = load_image(args.ref)
    mode = Mode(args.mode)
    run = PropagationRun(
        grays=grays,
        reference=reference,
        warp_net=load_warp_net(args.warp_ckpt) if args.warp_ckpt else None,
        fusion_net=load_fusion_net(args.fusion_ckpt) if args.fusion_ckpt else None,
        extractor=make_extractor(args.extractor, args.coarse_ratio)
        if mode in (Mode.FULL, Mode.GLOBAL_ONLY) else None,
        roi_margin=args.roi_margin,
    )
    outputs = propagate(run, mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame, img in zip(frames, outputs):
        save_image(out_dir / f"{frame.name}.png", img)
    timing_lines = ["frame,warp,match,fuse"]
    timing_lines += [f"{i},{t['warp']!r},{t['match']!r},{t['fuse']!r}"
                     for i, t in enumerate(run.timings, start=1)]
    (out_dir / "timings.csv").write_text("\n".join(timing_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(outputs)} frames to {out_dir}")
    return 0


def _has_direct_frames(directory: Path) -> bool:
    return any(p.suffix == ".png" for p in directory.iterdir() if p.is_file())


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if _has_direct_frames(pred_dir):
        report = evaluate(load_frame_dir(pred_dir), load_frame_dir(gt_dir))
    else:
        names = sorted(p.name for p in pred_dir.iterdir() if p.is_dir())
        if not names:
            raise FormatError(f"no frames or sequence directories in {pred_dir}")
        reports = [evaluate(load_frame_dir(pred_dir / n), load_frame_dir(gt_dir / n), n)
                   for n in names]
        report = combine_reports(reports)
    out = Path(args.out)
    write_summary_csv(report, out)
    write_frames_csv(report, out.with_suffix(out.suffix + ".frames.csv"))
    shown = {n: round(v, 2) for n, v in report.averages.items()}
    print(f"per-N averages: {shown}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chromaprop",
        description="Propagate the colors of a reference frame through a gray video.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-benchmark", help="generate a synthetic benchmark")
    p.add_argument("--spec", help="generator config file (key = value)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_benchmark)

    p = sub.add_parser("train", help="train the warp or fusion stage")
    p.add_argument("--stage", choices=[s.value for s in Stage], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", help="intermediate cache directory (fusion stage)")
    p.add_argument("--config", help="training config file (key = value)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--warp-ckpt", help="warp checkpoint for provenance check / joint mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("precompute", help="cache warped and matched intermediates")
    p.add_argument("--data", required=True)
    p.add_argument("--warp-ckpt", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--extractor", default="builtin")
    p.add_argument("--coarse-ratio", type=int, default=8)
    p.add_argument("--roi-margin", type=int, default=1)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("propagate", help="color a gray sequence")
    p.add_argument("--gray", required=True, help="directory of gray frames")
    p.add_argument("--ref", required=True, help="colored reference frame (PNG)")
    p.add_argument("--warp-ckpt")
    p.add_argument("--fusion-ckpt")
    p.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", default="builtin")
    p.add_argument("--coarse-ratio", type=int, default=8)
    p.add_argument("--roi-margin", type=int, default=1)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("evaluate", help="Lab-PSNR report for a colored sequence")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="summary CSV path")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except (FormatError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
