"""Two-stage training, current-frame detection, and future forecasting.

Stage 1 fits the detector (streams + autoencoder + multibox heads) to
annotated frames; with ``target_offset`` > 0 it instead pairs frame t with
the boxes of frame t+offset, which is the "train the detector directly on
future annotations" baseline.  Stage 2 freezes the detector and fits the
future regressor on (bottleneck stack at t, bottleneck at t+delta) pairs
drawn from the videos alone — no annotations are touched.

Inference composes the same pieces: detect(t) runs encode -> decode heads on
frame t; forecast(t, delta) runs the regressor on the K newest bottleneck
maps and decodes the predicted map.  Forecasting reads frames t-K .. t only;
the data layer's access audit can prove it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from fsnet.backbone import TwoStreamDetector, build_anchors, normalize_rgb
from fsnet.checkpoint import (
    assign_parameters,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
)
from fsnet.config import (
    EvalConfig,
    TrainConfig,
    backbone_from_dict,
    backbone_to_dict,
    regressor_from_dict,
    regressor_to_dict,
)
from fsnet.data import AnnotatedBox, VideoClip, to_chw01
from fsnet.errors import ConfigError, DataError, TrainingError
from fsnet.multibox import decode, encode_targets, match, nms, ssd_loss_grad
from fsnet.nn import sgd_step
from fsnet.optflow import flow_to_stream_input
from fsnet.regressor import (
    FeatureStack,
    FutureRegressor,
    reconstruction_loss_grad,
)

__all__ = [
    "TrainConfig",
    "ForecastRequest",
    "train_detector",
    "train_regressor",
    "load_detector",
    "load_regressor",
    "detect",
    "forecast",
    "detections_to_boxes",
    "write_loss_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastRequest:
    video: VideoClip
    t: int
    delta: int
    k: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.delta < 1:
            raise ConfigError(f"need k >= 1 and delta >= 1, got k={self.k} delta={self.delta}")
        if self.t - (self.k - 1) < 2:
            raise ConfigError(
                f"stack t-K+1={self.t - self.k + 1} has no flow predecessor (need >= 2)"
            )
        if self.t > self.video.num_frames:
            raise DataError(f"{self.video.id}: t={self.t} beyond {self.video.num_frames} frames")


def _inputs(clip: VideoClip, t: int, flow_params=None):
    frame = normalize_rgb(to_chw01(clip.load_frame(t)))
    flow = flow_to_stream_input(clip.ensure_flow(t, flow_params))
    return frame, flow


def write_loss_csv(path, columns, rows) -> None:
    def cell(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    lines = [",".join(columns)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _mean_step(params, state, cfg: TrainConfig, n: int) -> None:
    if cfg.lr == 0.0:
        return
    inv = 1.0 / n
    for p in params:
        p.grad *= inv
    if cfg.clip_norm > 0.0:
        norm = math.sqrt(sum(float(np.square(p.grad, dtype=np.float64).sum())
                             for p in params))
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for p in params:
                p.grad *= scale
    sgd_step(params, state, cfg.lr, cfg.momentum)


# ----------------------------------------------------------------- stage 1

def _detector_examples(clips, cfg: TrainConfig):
    """(clip, frame t, boxes of frame t+offset) for every usable frame."""
    out = []
    for clip in clips:
        ann = clip.annotations()
        for t in range(2, clip.num_frames + 1):
            tt = t + cfg.target_offset
            if tt > clip.num_frames:
                break
            boxes = ann.get(tt, [])
            if boxes:
                out.append((clip, t, boxes))
    return out


def train_detector(clips, backbone_config, train_cfg: TrainConfig, out_path, *,
                   log_path=None, flow_params=None):
    """Fit the two-stream detector; returns the per-epoch loss rows."""
    if not clips:
        raise DataError("empty dataset")
    classes = clips[0].classes
    if len(classes) != backbone_config.num_classes:
        raise ConfigError(
            f"dataset has {len(classes)} classes, backbone wants {backbone_config.num_classes}"
        )
    labels = {name: i for i, name in enumerate(classes, 1)}
    examples = _detector_examples(clips, train_cfg)
    if not examples:
        raise DataError("no annotated training frames")
    model = TwoStreamDetector(backbone_config, np.random.default_rng(train_cfg.seed))
    anchors = build_anchors(backbone_config)
    params = model.parameters()
    state: dict = {}
    rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(examples))
        losses = np.zeros((len(examples), 3))  # reduced in example order, not visit order
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            for i in batch:
                clip, t, boxes = examples[i]
                gt = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes])
                assign = match(anchors, gt, [labels[b.label] for b in boxes])
                frame, flow = _inputs(clip, t, flow_params)
                _, raw = model.forward(frame, flow, time_index=t)
                comps, grads = ssd_loss_grad(raw, assign, encode_targets(assign, anchors, gt))
                if not np.isfinite(comps[0]):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, {clip.id} frame {t}: {comps}"
                    )
                losses[i] = comps
                if train_cfg.lr > 0.0:
                    model.backward(grads)
            _mean_step(params, state, train_cfg, len(batch))
        rows.append((epoch, *map(float, losses.mean(axis=0))))
        log.info("detector epoch %d: loss %.4f", epoch, rows[-1][1])
    header = {
        "kind": "detector",
        "backbone": backbone_to_dict(backbone_config),
        "train": asdict(train_cfg),
        "classes": list(classes),
    }
    save_checkpoint(out_path, header, params)
    if log_path is not None:
        write_loss_csv(log_path, ("epoch", "loss", "loc_loss", "conf_loss"), rows)
    return rows


def load_detector(path):
    """-> (model with restored weights, checkpoint header config)."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "detector":
        raise DataError(f"{path}: not a detector checkpoint ({header.get('kind')!r})")
    model = TwoStreamDetector(backbone_from_dict(header["backbone"]))
    assign_parameters(model.parameters(), tensors)
    return model, header


# ----------------------------------------------------------------- stage 2

def _bottleneck(model: TwoStreamDetector, clip: VideoClip, t: int, cache: dict,
                flow_params=None):
    key = (clip.id, t)
    if key not in cache:
        frame, flow = _inputs(clip, t, flow_params)
        fused = model.fuse(
            model.encode_spatial(frame, t), model.encode_temporal(flow, t)
        )
        cache[key] = model.encode_bottleneck(fused)
    return cache[key]


def _regressor_pairs(clips, k: int, delta: int):
    pairs = []
    for clip in clips:
        lo, hi = k + 1, clip.num_frames - delta  # t-k+1 >= 2 and t+delta in range
        ts = range(lo, hi + 1)
        if not ts:
            log.warning("%s: too short for K=%d delta=%d, skipped", clip.id, k, delta)
            continue
        pairs += [(clip, t) for t in ts]
    if not pairs:
        raise DataError(f"every video is too short for K={k} delta={delta}")
    return pairs


def train_regressor(clips, detector_path, regressor_config, train_cfg: TrainConfig,
                    out_path, *, log_path=None, flow_params=None):
    """Fit the future regressor against the frozen detector's bottlenecks."""
    detector, det_header = load_detector(detector_path)
    k, delta = regressor_config.k, regressor_config.delta
    pairs = _regressor_pairs(clips, k, delta)
    model = FutureRegressor(regressor_config, np.random.default_rng(train_cfg.seed))
    params = model.parameters()
    state: dict = {}
    cache: dict = {}
    rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(pairs))
        losses = np.zeros(len(pairs))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            for i in batch:
                clip, t = pairs[i]
                stack = FeatureStack(tuple(
                    _bottleneck(detector, clip, t - j, cache, flow_params)
                    for j in range(k)
                ))
                target = _bottleneck(detector, clip, t + delta, cache, flow_params)
                loss, grad = reconstruction_loss_grad(model.forward(stack), target)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, {clip.id} frame {t}"
                    )
                losses[i] = loss
                if train_cfg.lr > 0.0:
                    model.backward(grad)
            _mean_step(params, state, train_cfg, len(batch))
        rows.append((epoch, float(losses.mean())))
        log.info("regressor epoch %d: loss %.4f", epoch, rows[-1][1])
    header = {
        "kind": "regressor",
        "regressor": regressor_to_dict(regressor_config),
        "backbone": det_header["backbone"],
        "classes": det_header["classes"],
        "train": asdict(train_cfg),
        "detector_sha256": file_sha256(detector_path),
    }
    save_checkpoint(out_path, header, params)
    if log_path is not None:
        write_loss_csv(log_path, ("epoch", "recon_loss"), rows)
    return rows


def load_regressor(path):
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "regressor":
        raise DataError(f"{path}: not a regressor checkpoint ({header.get('kind')!r})")
    model = FutureRegressor(regressor_from_dict(header["regressor"]))
    assign_parameters(model.parameters(), tensors)
    return model, header


# ---------------------------------------------------------------- inference

def detect(clip: VideoClip, t: int, detector: TwoStreamDetector, *,
           eval_cfg: EvalConfig = EvalConfig(), flow_params=None) -> list:
    """Detections on frame t (t >= 2: flow needs the previous frame)."""
    if t < 2:
        raise ConfigError(f"detect needs t >= 2, got {t}")
    frame, flow = _inputs(clip, t, flow_params)
    _, raw = detector.forward(frame, flow, time_index=t)
    dets = decode(raw, build_anchors(detector.config), eval_cfg.score_threshold)
    return nms(dets, eval_cfg.nms_iou, eval_cfg.top_k)


def forecast(request: ForecastRequest, detector: TwoStreamDetector,
             regressor: FutureRegressor, *, eval_cfg: EvalConfig = EvalConfig(),
             flow_params=None) -> list:
    """Detections forecast for frame t+delta from frames up to t only."""
    if request.k != regressor.config.k or request.delta != regressor.config.delta:
        raise ConfigError(
            f"request K={request.k} delta={request.delta} does not match checkpoint "
            f"K={regressor.config.k} delta={regressor.config.delta}"
        )
    cache: dict = {}
    stack = FeatureStack(tuple(
        _bottleneck(detector, request.video, request.t - j, cache, flow_params)
        for j in range(request.k)
    ))
    future = regressor.forward(stack)
    raw = detector.decode_and_detect(future)
    dets = decode(raw, build_anchors(detector.config), eval_cfg.score_threshold)
    return nms(dets, eval_cfg.nms_iou, eval_cfg.top_k)


def detections_to_boxes(dets, classes) -> list:
    """Detection list -> AnnotatedBox list (class ids become names)."""
    out = []
    for d in dets:
        if not 1 <= d.class_id <= len(classes):
            raise ConfigError(f"class_id {d.class_id} outside 1..{len(classes)}")
        out.append(AnnotatedBox(
            classes[d.class_id - 1], d.box.cx, d.box.cy, d.box.w, d.box.h, d.score
        ))
    return out
