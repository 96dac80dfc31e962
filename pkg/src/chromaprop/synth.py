"""Deterministic synthetic video sequences with ground-truth color.

Four scene kinds cover the propagation failure modes: static scenes,
rigid whole-frame translation, occlusion/dis-occlusion by a moving solid
object, and panning that keeps revealing new content. Every sequence is a
window into a larger textured canvas, so integer camera motion makes frame
k an exact shift of frame k-1 inside the overlap region.

Each sequence directory holds the color frames (0001.png, ...), a
`meta.txt` describing kind and motion, and for occlusion scenes a
`masks/` subdirectory marking the occluder footprint per frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colorspace import Image, Space
from .data import save_image
from .errors import ContractError, FormatError

META_NAME = "meta.txt"


@dataclass
class BenchmarkSpec:
    """Generator configuration; counts are sequences per scene kind."""

    width: int = 64
    height: int = 64
    frames: int = 8
    static: int = 2
    translation: int = 2
    occlusion: int = 2
    panning: int = 1
    max_shift: int = 3
    pan_shift: int = 5
    object_size: int = 20
    move_start: int = 2  # 1-based frame after which the occluder starts moving

    def validate(self) -> None:
        if min(self.width, self.height) < 16 or self.frames < 1:
            raise ContractError("resolution must be >= 16 and frames >= 1")
        if min(self.static, self.translation, self.occlusion, self.panning) < 0:
            raise ContractError("sequence counts must be >= 0")
        if not (1 <= self.max_shift <= min(self.width, self.height) // 4):
            raise ContractError("max_shift must be in [1, min(side)/4]")
        if self.pan_shift < 1 or self.object_size < 4:
            raise ContractError("pan_shift must be >= 1 and object_size >= 4")
        if not (1 <= self.move_start <= self.frames):
            raise ContractError("move_start must fall inside the sequence")


def _resize_bilinear(a: np.ndarray, oh: int, ow: int) -> np.ndarray:
    ih, iw = a.shape[:2]
    ys = np.clip((np.arange(oh) + 0.5) * ih / oh - 0.5, 0, ih - 1)
    xs = np.clip((np.arange(ow) + 0.5) * iw / ow - 0.5, 0, iw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    channels = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for idx, (r, g, b) in enumerate(channels):
        mask = i == idx
        out[mask, 0] = r[mask]
        out[mask, 1] = g[mask]
        out[mask, 2] = b[mask]
    return out


DETAIL_SCALES = ((24, 0.12), (10, 0.09), (5, 0.06), (3, 0.04))


def _textured_canvas(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth colored regions overlaid with multiscale luminance detail.

    All detail is spatially smooth (no per-pixel noise) so descriptors stay
    matchable, yet every neighborhood is distinct across the canvas.
    """
    gh, gw = h // 12 + 2, w // 12 + 2
    hue = rng.uniform(0, 1, (gh, gw))
    sat = rng.uniform(0.30, 0.65, (gh, gw))
    val = rng.uniform(0.30, 0.80, (gh, gw))
    base = _resize_bilinear(_hsv_to_rgb(hue, sat, val), h, w)
    detail = np.zeros((h, w, 1))
    for scale, amplitude in DETAIL_SCALES:
        grid = rng.uniform(-1, 1, (h // scale + 2, w // scale + 2, 1))
        detail += _resize_bilinear(grid, h, w) * amplitude
    return np.clip(base + detail, 0.0, 1.0)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    return _hsv_to_rgb(rng.uniform(0, 1, ()), np.asarray(0.9), np.asarray(0.95)).reshape(3)


def _paint_disc(frame: np.ndarray, cy: float, cx: float, radius: float,
                color: np.ndarray, rng_shade: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    out = frame.copy()
    # mild radial shading gives the warp net gradient cues inside the disc
    shade = 1.0 - 0.3 * np.sqrt(np.maximum((yy - cy) ** 2 + (xx - cx) ** 2, 0)) / max(radius, 1)
    out[mask] = np.clip(color[None, :] * shade[mask, None] + rng_shade[mask], 0, 1)
    return out, mask


def _write_meta(seq_dir: Path, fields: dict) -> None:
    lines = [f"{k} = {v}" for k, v in fields.items()]
    (seq_dir / META_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(seq_dir: str | Path) -> dict[str, str]:
    path = Path(seq_dir) / META_NAME
    if not path.exists():
        raise FormatError(f"missing metadata file: {path}")
    fields: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def _save_frames(seq_dir: Path, frames: list[np.ndarray]) -> None:
    seq_dir.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames, start=1):
        save_image(seq_dir / f"{k:04d}.png", Image(frame, Space.RGB))


def _moving_window(canvas: np.ndarray, h: int, w: int, y0: int, x0: int,
                   dy: int, dx: int, frames: int) -> list[np.ndarray]:
    out = []
    for k in range(frames):
        y = y0 + k * dy
        x = x0 + k * dx
        out.append(canvas[y:y + h, x:x + w].copy())
    return out


def gen_benchmark(spec: BenchmarkSpec, seed: int, out_dir: str | Path) -> list[str]:
    """Write the benchmark sequences under out_dir; returns sequence names."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w, n = spec.height, spec.width, spec.frames
    names: list[str] = []

    def canvas_for(shift: int) -> tuple[np.ndarray, int, int]:
        margin = shift * n + 4
        canvas = _textured_canvas(rng, h + 2 * margin, w + 2 * margin)
        return canvas, margin, margin

    for idx in range(spec.static):
        name = f"static_{idx:02d}"
        canvas, y0, x0 = canvas_for(0)
        _save_frames(out_dir / name, _moving_window(canvas, h, w, y0, x0, 0, 0, n))
        _write_meta(out_dir / name, {"kind": "static", "dx": 0, "dy": 0})
        names.append(name)

    for idx in range(spec.translation):
        name = f"trans_{idx:02d}"
        while True:
            dy = int(rng.integers(-spec.max_shift, spec.max_shift + 1))
            dx = int(rng.integers(-spec.max_shift, spec.max_shift + 1))
            if dy or dx:
                break
        canvas, y0, x0 = canvas_for(spec.max_shift)
        y0 += spec.max_shift * n // 2 * (-np.sign(dy) if dy else 0)
        x0 += spec.max_shift * n // 2 * (-np.sign(dx) if dx else 0)
        _save_frames(out_dir / name, _moving_window(canvas, h, w, int(y0), int(x0), dy, dx, n))
        _write_meta(out_dir / name, {"kind": "translation", "dx": dx, "dy": dy})
        names.append(name)

    for idx in range(spec.occlusion):
        name = f"occl_{idx:02d}"
        canvas, y0, x0 = canvas_for(0)
        background = canvas[y0:y0 + h, x0:x0 + w]
        color = _object_color(rng)
        shade = rng.uniform(-0.03, 0.03, (h, w, 1))
        radius = spec.object_size / 2
        cy0 = h / 2 + rng.uniform(-h / 8, h / 8)
        cx0 = w / 2 + rng.uniform(-w / 8, w / 8)
        speed = max(2, spec.max_shift)
        ody = int(rng.choice([-speed, speed]))
        odx = int(rng.choice([-speed, speed]))
        frames = []
        masks = []
        for k in range(1, n + 1):
            steps = max(0, k - spec.move_start)
            frame, mask = _paint_disc(background, cy0 + steps * ody, cx0 + steps * odx,
                                      radius, color, shade)
            frames.append(frame)
            masks.append(mask)
        seq_dir = out_dir / name
        _save_frames(seq_dir, frames)
        mask_dir = seq_dir / "masks"
        mask_dir.mkdir(exist_ok=True)
        for k, mask in enumerate(masks, start=1):
            save_image(mask_dir / f"{k:04d}.png",
                       Image(mask.astype(np.float32)[:, :, None], Space.GRAY))
        _write_meta(seq_dir, {"kind": "occlusion", "dx": odx, "dy": ody,
                              "move_start": spec.move_start,
                              "event_frame": spec.move_start + 1})
        names.append(name)

    for idx in range(spec.panning):
        name = f"pan_{idx:02d}"
        dx = spec.pan_shift
        canvas, y0, x0 = canvas_for(spec.pan_shift)
        _save_frames(out_dir / name, _moving_window(canvas, h, w, y0, x0, 0, dx, n))
        _write_meta(out_dir / name, {"kind": "panning", "dx": dx, "dy": 0})
        names.append(name)

    return names
