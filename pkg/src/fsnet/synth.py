"""Synthetic videos: colored shapes on a panning textured background.

Each video is a camera-pan over multi-octave value noise with a few solid
shapes moving at constant velocity.  Trajectories are anchored mid-clip, so
fast objects routinely start or end outside the frame — forecasting has to
handle entrants that are invisible in the observed frame.  Everything is a
pure function of the spec seed: regenerating a dataset is byte-identical.

Geometry is normalized: boxes use [0, 1] coordinates, object `size` is the
full bounding-box width, and velocities inside SynthObject are units/frame
(SynthSpec speaks px/frame and converts when sampling).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fsnet.data import AnnotatedBox, write_annotations, write_ppm
from fsnet.errors import ConfigError, DataError

__all__ = [
    "SHAPES",
    "SIZE_RANGE",
    "SynthSpec",
    "SynthObject",
    "object_box_at",
    "clip_box",
    "gen_synth",
]

SHAPES = ("circle", "square", "triangle")
_COLORS = {
    "circle": (210, 60, 50),
    "square": (60, 190, 80),
    "triangle": (70, 90, 215),
}
SIZE_RANGE = (0.16, 0.30)  # object width as a fraction of the frame


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int
    frames_per_video: int
    image_size: int
    num_classes: int = 3
    objects_per_video: int = 3
    velocity_range: tuple = (2.2, 3.2)  # px/frame
    pan_speed: float = 0.8  # background px/frame (ego-motion)
    fps: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_videos < 1 or self.frames_per_video < 2:
            raise ConfigError("need >= 1 video of >= 2 frames")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be 1..{len(SHAPES)}")
        if self.objects_per_video < 1:
            raise ConfigError("need >= 1 object per video")
        vmin, vmax = self.velocity_range
        if vmin < 0 or vmax < vmin:
            raise ConfigError(f"bad velocity range {self.velocity_range}")
        travel = vmin * (self.frames_per_video - 1)
        # moving objects must cross at least their own width; (0, 0) is the
        # explicitly-allowed static mode used by identity tests
        if vmax > 0 and travel < SIZE_RANGE[1] * self.image_size:
            raise ConfigError(
                f"min speed {vmin} px/f covers {travel:.0f} px over the clip, "
                f"less than one object width ({SIZE_RANGE[1] * self.image_size:.0f} px)"
            )
        if self.pan_speed < 0 or self.fps <= 0:
            raise ConfigError("pan_speed must be >= 0 and fps > 0")

    @property
    def classes(self) -> tuple:
        return SHAPES[: self.num_classes]


@dataclass(frozen=True)
class SynthObject:
    shape: str
    cx0: float
    cy0: float
    vx: float
    vy: float
    size: float


def object_box_at(obj: SynthObject, t: int) -> tuple:
    """Unclipped (cx, cy, w, h) at frame t (1-based): linear motion."""
    return (
        obj.cx0 + obj.vx * (t - 1),
        obj.cy0 + obj.vy * (t - 1),
        obj.size,
        obj.size,
    )


def clip_box(box: tuple, label: str, min_extent: float) -> AnnotatedBox | None:
    """Visible portion of `box`, or None when (nearly) fully off-frame."""
    cx, cy, w, h = box
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
    if x1 - x0 < min_extent or y1 - y0 < min_extent:
        return None
    return AnnotatedBox(label, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, h: int, w: int, cell: int) -> np.ndarray:
    grid = rng.random((h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(np.intp)
    x0 = xs.astype(np.intp)
    fy = _smooth(ys - y0)[:, None]
    fx = _smooth(xs - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy


def _background_canvas(rng, spec: SynthSpec) -> np.ndarray:
    """Noise large enough to pan across for the whole clip, values [0.25, 0.75]."""
    pad = int(np.ceil(spec.pan_speed * (spec.frames_per_video - 1))) + 2
    side = spec.image_size + pad
    acc = np.zeros((side, side))
    for weight, cell in ((0.5, spec.image_size // 3), (0.3, spec.image_size // 6), (0.2, spec.image_size // 12)):
        acc += weight * _value_noise(rng, side, side, max(cell, 2))
    return 0.25 + 0.5 * acc


def _sample_window(canvas: np.ndarray, oy: float, ox: float, size: int) -> np.ndarray:
    y = np.arange(size) + oy
    x = np.arange(size) + ox
    y0 = np.clip(np.floor(y).astype(np.intp), 0, canvas.shape[0] - 2)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, canvas.shape[1] - 2)
    fy = (y - y0)[:, None]
    fx = (x - x0)[None, :]
    tl = canvas[np.ix_(y0, x0)]
    tr = canvas[np.ix_(y0, x0 + 1)]
    bl = canvas[np.ix_(y0 + 1, x0)]
    br = canvas[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy


def _shape_mask(shape: str, size_img: int, cx: float, cy: float, w: float) -> np.ndarray:
    """Pixel-center insideness test; all coordinates in pixels."""
    c = np.arange(size_img) + 0.5
    xx, yy = np.meshgrid(c, c)
    half = w / 2
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= half
    if shape == "triangle":  # apex up, same w x w bounding box
        rel = yy - (cy - half)
        return (rel >= 0) & (rel <= w) & (np.abs(xx - cx) <= rel / 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _sample_objects(rng, spec: SynthSpec) -> list:
    objs = []
    mid = (spec.frames_per_video + 1) / 2
    for j in range(spec.objects_per_video):
        shape = spec.classes[j % spec.num_classes]
        size = rng.uniform(*SIZE_RANGE)
        speed = rng.uniform(*spec.velocity_range) / spec.image_size
        ang = rng.uniform(0.0, 2.0 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        # anchor mid-clip inside the frame; endpoints may fall off-screen
        margin = size / 2
        mx = rng.uniform(margin, 1 - margin)
        my = rng.uniform(margin, 1 - margin)
        objs.append(SynthObject(shape, mx - vx * (mid - 1), my - vy * (mid - 1), vx, vy, size))
    return objs


def _render_frame(spec, canvas, oy, ox, objs, t) -> np.ndarray:
    s = spec.image_size
    gray = _sample_window(canvas, oy, ox, s)
    img = np.repeat((gray * 255.0)[:, :, None], 3, axis=2)
    for obj in objs:
        cx, cy, w, _ = object_box_at(obj, t)
        mask = _shape_mask(obj.shape, s, cx * s, cy * s, w * s)
        img[mask] = _COLORS[obj.shape]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_synth(spec: SynthSpec, out_dir) -> list:
    """Write the dataset under `out_dir`; returns the video directories."""
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    dirs = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(1, spec.num_videos + 1):
            vdir = out / f"video_{i:03d}"
            (vdir / "frames").mkdir(parents=True, exist_ok=True)
            canvas = _background_canvas(rng, spec)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            pan = (spec.pan_speed * np.sin(ang), spec.pan_speed * np.cos(ang))  # (dy, dx)
            base = (
                1.0 + max(0.0, -pan[0] * (spec.frames_per_video - 1)),
                1.0 + max(0.0, -pan[1] * (spec.frames_per_video - 1)),
            )
            objs = _sample_objects(rng, spec)
            ann = {}
            for t in range(1, spec.frames_per_video + 1):
                oy = base[0] + pan[0] * (t - 1)
                ox = base[1] + pan[1] * (t - 1)
                write_ppm(
                    vdir / "frames" / f"{t:06d}.ppm",
                    _render_frame(spec, canvas, oy, ox, objs, t),
                )
                boxes = []
                for obj in objs:
                    # annotate only while at least half the extent is visible:
                    # heavily truncated boxes make neither good targets nor
                    # fair ground truth
                    clipped = clip_box(object_box_at(obj, t), obj.shape, 0.5 * obj.size)
                    if clipped is not None:
                        boxes.append(clipped)
                ann[t] = boxes  # every frame gets a line, even with no boxes
            write_annotations(vdir / "annotations.jsonl", ann)
            meta = {
                "fps": spec.fps,
                "classes": list(spec.classes),
                "image_size": spec.image_size,
            }
            (vdir / "meta.json").write_text(
                json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8"
            )
            dirs.append(vdir)
    except OSError as e:
        raise DataError(f"cannot write dataset under {out}: {e}") from e
    return dirs
