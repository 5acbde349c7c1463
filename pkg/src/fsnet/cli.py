"""Command-line surface: `fsnet <command> ...`.

Commands cover the whole workflow: render a synthetic dataset (gen-synth),
precompute optical flow (flow), fit the detector and the future regressor
(train-detector, train-regressor), emit forecast boxes for one future frame
(forecast), and score prediction files against ground truth (evaluate).

Exit codes: 0 success; 1 bad invocation or configuration; 2 bad input data;
3 numeric failure during training.  Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from fsnet.checkpoint import load_checkpoint
from fsnet.config import (
    EvalConfig,
    RunConfig,
    _RUN_PRESETS,
    backbone_from_dict,
    load_run_config,
    preset_run_config,
)
from fsnet.data import (
    _check_box,
    load_dataset,
    load_video,
    to_chw01,
    write_annotations,
)
from fsnet.errors import ConfigError, DataError, TrainingError, UsageError
from fsnet.evaluate import (
    EvalRecord,
    map_score,
    pr_curve,
    precision_recall_f,
    presence_ap,
    write_report,
)
from fsnet.optflow import grayscale, tvl1_flow, write_flow
from fsnet.regressor import RegressorConfig
from fsnet.synth import SynthSpec, gen_synth
from fsnet import pipeline

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the codes
        raise UsageError(message)


def _run_config(value: str) -> RunConfig:
    """--config accepts a JSON file path or a bare preset name."""
    if Path(value).exists():
        return load_run_config(value)
    if value in _RUN_PRESETS:
        return preset_run_config(value)
    raise ConfigError(f"config {value!r} is neither a file nor a preset "
                      f"(presets: {sorted(_RUN_PRESETS)})")


# ----------------------------------------------------------------- gen-synth

_SPEC_FLAGS = (
    ("num_videos", int),
    ("frames_per_video", int),
    ("image_size", int),
    ("num_classes", int),
    ("objects_per_video", int),
    ("pan_speed", float),
    ("fps", float),
    ("seed", int),
)


def _cmd_gen_synth(args) -> int:
    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read spec {args.spec}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: bad JSON: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError("synth spec must be a JSON object")
        if isinstance(doc.get("velocity_range"), list):
            doc["velocity_range"] = tuple(doc["velocity_range"])
    for name, _ in _SPEC_FLAGS:
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    if args.velocity_min is not None or args.velocity_max is not None:
        base = doc.get("velocity_range", SynthSpec.__dataclass_fields__["velocity_range"].default)
        doc["velocity_range"] = (
            base[0] if args.velocity_min is None else args.velocity_min,
            base[1] if args.velocity_max is None else args.velocity_max,
        )
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"synth spec: unknown keys {sorted(unknown)}")
    try:
        spec = SynthSpec(**doc)
    except TypeError as e:
        raise ConfigError(f"synth spec: {e}") from e
    gen_synth(spec, args.out)
    print(f"wrote {spec.num_videos} videos x {spec.frames_per_video} frames under {args.out}")
    return 0


# ---------------------------------------------------------------------- flow

def _cmd_flow(args) -> int:
    clip = load_video(args.video)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e}") from e
    prev = grayscale(to_chw01(clip.load_frame(1)))
    for t in range(2, clip.num_frames + 1):
        cur = grayscale(to_chw01(clip.load_frame(t)))
        write_flow(out / f"{t:06d}.fsfl", tvl1_flow(prev, cur))
        prev = cur
    n = clip.num_frames - 1
    print(f"wrote {n} flow fields for {clip.id} under {out}")
    return 0


# ------------------------------------------------------------------ training

def _cmd_train_detector(args) -> int:
    run = _run_config(args.config)
    clips = load_dataset(args.data)
    tc = run.train
    if args.target_offset is not None:
        tc = dataclasses.replace(tc, target_offset=args.target_offset)
    if tc.stage != "detector":
        tc = dataclasses.replace(tc, stage="detector")
    rows = pipeline.train_detector(
        clips, run.backbone, tc, args.out, log_path=f"{args.out}.loss.csv",
    )
    print(f"detector checkpoint {args.out}: {tc.epochs} epochs, "
          f"final loss {rows[-1][1]:.4f} (log {args.out}.loss.csv)")
    return 0


def _cmd_train_regressor(args) -> int:
    run = _run_config(args.config)
    header, _ = load_checkpoint(args.detector)
    if header.get("kind") != "detector":
        raise DataError(f"{args.detector}: not a detector checkpoint")
    backbone = backbone_from_dict(header["backbone"])
    reg_cfg = RegressorConfig(
        k=run.regressor.k if args.k is None else args.k,
        delta=run.regressor.delta if args.delta is None else args.delta,
        bottleneck_channels=backbone.bottleneck_channels,
    )
    tc = dataclasses.replace(run.train, stage="regressor")
    clips = load_dataset(args.data)
    rows = pipeline.train_regressor(
        clips, args.detector, reg_cfg, tc, args.out, log_path=f"{args.out}.loss.csv",
    )
    print(f"regressor checkpoint {args.out}: K={reg_cfg.k} delta={reg_cfg.delta}, "
          f"final loss {rows[-1][1]:.6f} (log {args.out}.loss.csv)")
    return 0


# ------------------------------------------------------------------ forecast

def _cmd_forecast(args) -> int:
    detector, det_header = pipeline.load_detector(args.detector)
    regressor, _ = pipeline.load_regressor(args.regressor)
    clip = load_video(args.video)
    request = pipeline.ForecastRequest(clip, t=args.t, delta=args.delta,
                                       k=regressor.config.k)
    eval_cfg = EvalConfig()
    if args.score_threshold is not None:
        eval_cfg = dataclasses.replace(eval_cfg, score_threshold=args.score_threshold)
    dets = pipeline.forecast(request, detector, regressor, eval_cfg=eval_cfg)
    boxes = pipeline.detections_to_boxes(dets, det_header["classes"])
    write_annotations(args.out, {args.t + args.delta: boxes})
    print(f"forecast {clip.id} frame {args.t}+{args.delta}: {len(boxes)} boxes -> {args.out}")
    return 0


# ------------------------------------------------------------------ evaluate

def _read_interchange(path) -> dict:
    """JSONL {"frame", "boxes"[, "video"]} -> {(video, frame): [AnnotatedBox]}."""
    out: dict = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{where}: bad JSON: {e.msg}") from e
        if not isinstance(rec, dict) or "frame" not in rec or "boxes" not in rec:
            raise DataError(f"{where}: record needs frame and boxes")
        extra = set(rec) - {"frame", "boxes", "video"}
        if extra:
            raise DataError(f"{where}: unknown keys {sorted(extra)}")
        t, video = rec["frame"], rec.get("video", "")
        if not isinstance(t, int) or t < 1:
            raise DataError(f"{where}: frame must be a positive integer, got {t!r}")
        if not isinstance(video, str):
            raise DataError(f"{where}: video must be a string")
        if not isinstance(rec["boxes"], list):
            raise DataError(f"{where}: boxes must be a list")
        out.setdefault((video, t), []).extend(_check_box(b, where) for b in rec["boxes"])
    return out


def _cmd_evaluate(args) -> int:
    pred = _read_interchange(args.pred)
    gt = _read_interchange(args.gt)
    records = [
        EvalRecord(frame=t, detections=tuple(pred.get((video, t), ())),
                   truths=tuple(gt.get((video, t), ())), video=video)
        for video, t in sorted(set(pred) | set(gt))
    ]
    classes = sorted({b.label for boxes in gt.values() for b in boxes})
    if not classes:
        raise DataError(f"{args.gt}: ground truth has no boxes")
    curves: dict = {}
    if args.mode == "location":
        mean_ap, per_class, skipped = map_score(records, classes, args.iou)
        curves = {cls: pr_curve(records, cls, args.iou) for cls in per_class}
        metrics = {"mode": "location", "iou": args.iou, "map": mean_ap,
                   "per_class": per_class, "skipped": skipped}
        print(f"location mAP {mean_ap:.4f} over {len(per_class)} classes -> {args.out}")
    elif args.mode == "presence":
        mean_ap, per_class, skipped = presence_ap(records, classes)
        metrics = {"mode": "presence", "map": mean_ap,
                   "per_class": per_class, "skipped": skipped}
        print(f"presence mAP {mean_ap:.4f} over {len(per_class)} classes -> {args.out}")
    else:  # hands: box-level precision/recall/F with per-video spread
        rep = precision_recall_f(records, args.iou)
        metrics = {"mode": "hands", "iou": args.iou,
                   "precision": rep.precision, "recall": rep.recall,
                   "f_measure": rep.f_measure, "per_video": rep.per_video,
                   "mean": rep.mean, "std": rep.std}
        print(f"precision {rep.precision:.4f} recall {rep.recall:.4f} "
              f"F {rep.f_measure:.4f} -> {args.out}")
    write_report(metrics, curves, args.out)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="render a synthetic shape-motion dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--spec", help="SynthSpec JSON file (flags override its fields)")
    for name, typ in _SPEC_FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, dest=name)
    p.add_argument("--velocity-min", type=float)
    p.add_argument("--velocity-max", type=float)
    p.set_defaults(fn=_cmd_gen_synth)

    p = sub.add_parser("flow", help="precompute optical flow for one video")
    p.add_argument("--video", required=True, help="video directory")
    p.add_argument("--out", required=True, help="flow output directory")
    p.set_defaults(fn=_cmd_flow)

    p = sub.add_parser("train-detector", help="stage 1: fit the two-stream detector")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="run config JSON or preset name")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--target-offset", type=int,
                   help="pair frame t with the boxes of frame t+N")
    p.set_defaults(fn=_cmd_train_detector)

    p = sub.add_parser("train-regressor", help="stage 2: fit the future regressor")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--detector", required=True, help="stage-1 checkpoint")
    p.add_argument("--delta", type=int, help="forecast horizon in frames")
    p.add_argument("--k", type=int, help="history length in frames")
    p.add_argument("--config", required=True, help="run config JSON or preset name")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=_cmd_train_regressor)

    p = sub.add_parser("forecast", help="predict boxes for a future frame")
    p.add_argument("--detector", required=True)
    p.add_argument("--regressor", required=True)
    p.add_argument("--video", required=True, help="video directory")
    p.add_argument("--t", type=int, required=True, help="last observed frame")
    p.add_argument("--delta", type=int, required=True, help="horizon in frames")
    p.add_argument("--out", required=True, help="predictions JSONL to write")
    p.add_argument("--score-threshold", type=float,
                   help="keep detections scoring above this (default 0.25)")
    p.set_defaults(fn=_cmd_forecast)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--mode", choices=("location", "presence", "hands"),
                   default="location")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
