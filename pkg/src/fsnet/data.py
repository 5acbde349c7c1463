"""Dataset plumbing: PPM frames, JSONL boxes, video clips, access auditing.

A dataset directory holds one subdirectory per video; each video directory is
self-contained::

    video_001/
        meta.json            {"fps": ..., "classes": [...], "image_size": ...}
        frames/000001.ppm    contiguous, 1-based
        annotations.jsonl    one {"frame": t, "boxes": [...]} object per line
        flow/000002.fsfl     optional cache, written on demand

Every frame/flow read is reported to any active `frame_access_audit` blocks,
which is how the no-future-frames guarantee of forecasting is enforced in
tests rather than by convention.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fsnet.errors import DataError

__all__ = [
    "AnnotatedBox",
    "VideoClip",
    "read_ppm",
    "write_ppm",
    "to_chw01",
    "read_annotations",
    "write_annotations",
    "label_map",
    "load_video",
    "load_dataset",
    "frame_access_audit",
]


# ---------------------------------------------------------------- PPM frames

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, 8-bit; `img` is (H, W, 3) uint8."""
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"PPM wants (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated PPM header")
        c = raw[pos : pos + 1]
        if c in b" \t\r\n":
            pos += 1
        elif c == b"#":  # comment to end of line
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise DataError(f"{path}: unterminated PPM comment")
            pos = nl + 1
        else:
            end = pos
            while end < len(raw) and raw[end : end + 1] not in b" \t\r\n#":
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric PPM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{path}: unsupported PPM geometry {w}x{h}/{maxval}")
    data = raw[pos + 1 :]  # exactly one whitespace byte separates header and pixels
    if len(data) != 3 * w * h:
        raise DataError(f"{path}: payload is {len(data)} bytes, expected {3 * w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def to_chw01(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


# ------------------------------------------------------------- access audit

_access_logs: list[list] = []


@contextlib.contextmanager
def frame_access_audit():
    """Yields a list that collects (video_id, frame_index) for every read."""
    log: list = []
    _access_logs.append(log)
    try:
        yield log
    finally:
        _access_logs.remove(log)


def _note_access(video_id: str, index: int) -> None:
    for log in _access_logs:
        log.append((video_id, index))


# -------------------------------------------------------------- annotations

@dataclass(frozen=True)
class AnnotatedBox:
    label: str
    cx: float
    cy: float
    w: float
    h: float
    score: float | None = None


def _check_box(d: dict, where: str) -> AnnotatedBox:
    for key in ("class", "cx", "cy", "w", "h"):
        if key not in d:
            raise DataError(f"{where}: box missing {key!r}")
    unknown = set(d) - {"class", "cx", "cy", "w", "h", "score"}
    if unknown:
        raise DataError(f"{where}: unknown box keys {sorted(unknown)}")
    label = d["class"]
    if not isinstance(label, str) or not label:
        raise DataError(f"{where}: class must be a non-empty string")
    vals = {}
    for key in ("cx", "cy", "w", "h"):
        v = d[key]
        if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
            raise DataError(f"{where}: {key}={v!r} outside [0, 1]")
        vals[key] = float(v)
    if vals["w"] == 0.0 or vals["h"] == 0.0:
        raise DataError(f"{where}: degenerate box extent")
    score = d.get("score")
    if score is not None:
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise DataError(f"{where}: score={score!r} outside [0, 1]")
        score = float(score)
    return AnnotatedBox(label, vals["cx"], vals["cy"], vals["w"], vals["h"], score)


def read_annotations(path, num_frames: int | None = None) -> dict:
    """-> {frame index: [AnnotatedBox, ...]}; reports bad lines by number."""
    out: dict[int, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: bad JSON: {e.msg}") from e
            if not isinstance(rec, dict) or "frame" not in rec or "boxes" not in rec:
                raise DataError(f"{where}: record needs frame and boxes")
            t = rec["frame"]
            if not isinstance(t, int) or t < 1:
                raise DataError(f"{where}: frame must be a positive integer, got {t!r}")
            if num_frames is not None and t > num_frames:
                raise DataError(f"{where}: frame {t} not in video (1..{num_frames})")
            if not isinstance(rec["boxes"], list):
                raise DataError(f"{where}: boxes must be a list")
            out.setdefault(t, []).extend(_check_box(b, where) for b in rec["boxes"])
    return out


def write_annotations(path, frames: dict) -> None:
    """Inverse of read_annotations; frames written in ascending index order."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in sorted(frames):
            boxes = []
            for b in frames[t]:
                d = {"class": b.label, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                if b.score is not None:
                    d["score"] = b.score
                boxes.append(d)
            fh.write(json.dumps({"frame": t, "boxes": boxes}) + "\n")


def label_map(classes) -> dict:
    """Class name -> 1-based integer label (0 is background)."""
    return {name: i for i, name in enumerate(classes, 1)}


# --------------------------------------------------------------- video clips

@dataclass(frozen=True)
class VideoClip:
    id: str
    root: Path
    fps: float
    frame_paths: tuple
    annotation_path: Path | None
    classes: tuple
    image_size: int

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)

    def _check_index(self, t: int) -> None:
        if not 1 <= t <= self.num_frames:
            raise DataError(f"{self.id}: frame {t} not in 1..{self.num_frames}")

    def frame_path(self, t: int) -> Path:
        self._check_index(t)
        return self.frame_paths[t - 1]

    def load_frame(self, t: int) -> np.ndarray:
        path = self.frame_path(t)
        _note_access(self.id, t)
        img = read_ppm(path)
        if img.shape[:2] != (self.image_size, self.image_size):
            raise DataError(f"{path}: frame is {img.shape[:2]}, meta says {self.image_size}")
        return img

    def flow_path(self, t: int) -> Path:
        self._check_index(t)
        if t < 2:
            raise DataError(f"{self.id}: flow needs a predecessor frame, got t={t}")
        return self.root / "flow" / f"{t:06d}.fsfl"

    def ensure_flow(self, t: int, params=None):
        """Flow into frame t, from the cache or computed (and cached) now."""
        from fsnet.optflow import grayscale, read_flow, tvl1_flow, write_flow

        path = self.flow_path(t)
        if path.is_file():
            _note_access(self.id, t)  # cached flow still derives from frames <= t
            return read_flow(path)
        prev = grayscale(to_chw01(self.load_frame(t - 1)))
        cur = grayscale(to_chw01(self.load_frame(t)))
        flow = tvl1_flow(prev, cur, params)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_flow(path, flow)
        return flow

    def annotations(self) -> dict:
        if self.annotation_path is None:
            return {}
        return read_annotations(self.annotation_path, self.num_frames)


def load_video(path) -> VideoClip:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"{root}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{meta_path}: bad JSON: {e.msg}") from e
    for key in ("fps", "classes", "image_size"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing {key!r}")
    fps = meta["fps"]
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise DataError(f"{meta_path}: fps must be positive, got {fps!r}")
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"{root}: missing frames/ directory")
    paths = sorted(frames_dir.glob("*.ppm"))
    if not paths:
        raise DataError(f"{frames_dir}: no frames")
    for i, p in enumerate(paths, 1):
        if p.name != f"{i:06d}.ppm":
            raise DataError(f"{frames_dir}: frames not contiguous from 000001 at {p.name}")
    ann = root / "annotations.jsonl"
    clip = VideoClip(
        id=root.name,
        root=root,
        fps=float(fps),
        frame_paths=tuple(paths),
        annotation_path=ann if ann.is_file() else None,
        classes=tuple(meta["classes"]),
        image_size=int(meta["image_size"]),
    )
    if clip.annotation_path is not None:
        clip.annotations()  # validate eagerly so load errors surface here
    return clip


def load_dataset(path) -> list:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    clips = [load_video(d) for d in dirs]
    if not clips:
        raise DataError(f"{root}: no video directories")
    first = clips[0]
    for c in clips[1:]:
        if c.classes != first.classes or c.image_size != first.image_size:
            raise DataError(
                f"{c.id}: classes/image_size disagree with {first.id} "
                f"({c.classes}/{c.image_size} vs {first.classes}/{first.image_size})"
            )
    return clips
