"""Detection metrics: greedy matching, P/R/F, PR curves, AP/mAP, presence.

Everything is a pure function of EvalRecord lists.  Boxes are the shared
AnnotatedBox interchange type; a missing prediction score counts as 1.0.
Classes without any ground truth in the record set have undefined AP: the
per-class entry points raise, and the mAP wrappers exclude those classes and
report them in a `skipped` list instead of silently averaging over them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fsnet.data import AnnotatedBox
from fsnet.errors import DataError
from fsnet.multibox import iou_matrix

__all__ = [
    "EvalRecord",
    "PrCurve",
    "PrfReport",
    "build_records",
    "match_detections",
    "precision_recall_f",
    "pr_curve",
    "average_precision",
    "map_score",
    "presence_ap",
    "write_report",
]


@dataclass(frozen=True)
class EvalRecord:
    frame: int
    detections: tuple
    truths: tuple
    video: str = ""


@dataclass(frozen=True)
class PrCurve:
    """(threshold, recall, precision) per kept detection, best score first."""

    points: tuple

    def __post_init__(self) -> None:
        recalls = [p[1] for p in self.points]
        if any(b < a for a, b in zip(recalls, recalls[1:])):
            raise DataError("recall must be non-decreasing along a PR curve")


@dataclass(frozen=True)
class PrfReport:
    precision: float
    recall: float
    f_measure: float
    per_video: dict
    mean: tuple
    std: tuple


def build_records(pred_frames: dict, gt_frames: dict, video: str = "") -> list:
    """Pair {frame: [AnnotatedBox]} dicts into records over the frame union."""
    frames = sorted(set(pred_frames) | set(gt_frames))
    return [
        EvalRecord(
            frame=t,
            detections=tuple(pred_frames.get(t, [])),
            truths=tuple(gt_frames.get(t, [])),
            video=video,
        )
        for t in frames
    ]


def _score(box: AnnotatedBox) -> float:
    return 1.0 if box.score is None else box.score


def _check_records(records) -> None:
    if not records:
        raise DataError("no evaluation records")
    seen = set()
    for r in records:
        key = (r.video, r.frame)
        if key in seen:
            raise DataError(f"duplicate frame id {key}")
        seen.add(key)


def _as_array(boxes) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64)


def match_detections(record: EvalRecord, iou_threshold: float = 0.5) -> list:
    """Per-detection TP flags (record order): greedy best-IoU, one gt each."""
    dets, gts = record.detections, record.truths
    tp = [False] * len(dets)
    if not dets or not gts:
        return tp
    overlap = iou_matrix(_as_array(dets), _as_array(gts))
    claimed = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-_score(dets[i]), i))
    for i in order:
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gts):
            if claimed[j] or g.label != dets[i].label:
                continue
            if overlap[i, j] > best or (best_j < 0 and overlap[i, j] == best):
                best, best_j = overlap[i, j], j  # strict > keeps the lower index
        if best_j >= 0:
            tp[i] = True
            claimed[best_j] = True
    return tp


def _prf(tp: int, fp: int, fn: int) -> tuple:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def precision_recall_f(records, iou_threshold: float = 0.5) -> PrfReport:
    """Micro-averaged P/R/F plus per-video values with their mean and std."""
    _check_records(records)
    counts = {}  # video -> [tp, fp, fn]
    total = [0, 0, 0]
    for rec in records:
        flags = match_detections(rec, iou_threshold)
        tp = sum(flags)
        fp = len(rec.detections) - tp
        fn = len(rec.truths) - tp
        bucket = counts.setdefault(rec.video, [0, 0, 0])
        for slot, v in enumerate((tp, fp, fn)):
            bucket[slot] += v
            total[slot] += v
    per_video = {vid: _prf(*c) for vid, c in sorted(counts.items())}
    stacked = np.array(list(per_video.values()), dtype=np.float64)
    return PrfReport(
        *_prf(*total),
        per_video=per_video,
        mean=tuple(float(x) for x in stacked.mean(axis=0)),
        std=tuple(float(x) for x in stacked.std(axis=0)),
    )


def _ranked_ap(pairs, n_pos: int) -> tuple:
    """pairs: (score, is_tp) sorted best first -> (AP, PrCurve points)."""
    points = []
    tp = fp = 0
    for score, hit in pairs:
        tp += int(hit)
        fp += int(not hit)
        points.append((score, tp / n_pos, tp / (tp + fp)))
    if not points:
        return 0.0, ()
    prec = [p[2] for p in points]
    for i in range(len(prec) - 2, -1, -1):  # all-point precision envelope
        prec[i] = max(prec[i], prec[i + 1])
    ap = 0.0
    prev_r = 0.0
    for (_, r, _), p_env in zip(points, prec):
        ap += (r - prev_r) * p_env
        prev_r = r
    return ap, tuple(points)


def _class_pairs(records, cls: str, iou_threshold: float) -> tuple:
    n_pos = sum(1 for r in records for g in r.truths if g.label == cls)
    if n_pos == 0:
        raise DataError(f"class {cls!r} has no ground-truth instances")
    pairs = []
    for idx, rec in enumerate(records):
        flags = match_detections(rec, iou_threshold)
        for d, hit in zip(rec.detections, flags):
            if d.label == cls:
                pairs.append((_score(d), hit, idx))
    pairs.sort(key=lambda t: (-t[0], t[2]))
    return [(s, hit) for s, hit, _ in pairs], n_pos


def pr_curve(records, cls: str, iou_threshold: float = 0.5) -> PrCurve:
    _check_records(records)
    pairs, n_pos = _class_pairs(records, cls, iou_threshold)
    return PrCurve(_ranked_ap(pairs, n_pos)[1])


def average_precision(records, cls: str, iou_threshold: float = 0.5) -> float:
    _check_records(records)
    pairs, n_pos = _class_pairs(records, cls, iou_threshold)
    return _ranked_ap(pairs, n_pos)[0]


def map_score(records, classes, iou_threshold: float = 0.5) -> tuple:
    """-> (mAP, {class: AP}, [classes skipped for lack of ground truth])."""
    _check_records(records)
    per_class, skipped = {}, []
    for cls in classes:
        try:
            pairs, n_pos = _class_pairs(records, cls, iou_threshold)
        except DataError:
            skipped.append(cls)
            continue
        per_class[cls] = _ranked_ap(pairs, n_pos)[0]
    if not per_class:
        raise DataError("no class has ground truth; mAP undefined")
    return sum(per_class.values()) / len(per_class), per_class, skipped


def presence_ap(records, classes) -> tuple:
    """Frame-level 'will it appear' AP: score = best detection of the class."""
    _check_records(records)
    per_class, skipped = {}, []
    for cls in classes:
        labels = []
        scores = []
        for rec in records:
            labels.append(any(g.label == cls for g in rec.truths))
            scores.append(max((_score(d) for d in rec.detections if d.label == cls), default=0.0))
        n_pos = sum(labels)
        if n_pos == 0:
            skipped.append(cls)
            continue
        order = sorted(range(len(records)), key=lambda i: (-scores[i], i))
        pairs = [(scores[i], labels[i]) for i in order]
        per_class[cls] = _ranked_ap(pairs, n_pos)[0]
    if not per_class:
        raise DataError("no class is ever present; presence mAP undefined")
    return sum(per_class.values()) / len(per_class), per_class, skipped


def write_report(metrics: dict, pr_curves: dict, out_dir) -> None:
    """JSON summary plus one threshold,recall,precision CSV per class."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for cls, curve in pr_curves.items():
            lines = ["threshold,recall,precision"]
            lines += [f"{t!r},{r!r},{p!r}" for t, r, p in curve.points]
            (out / f"pr_{cls}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write report under {out}: {e}") from e
