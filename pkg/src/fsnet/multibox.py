"""Anchor-based detection machinery: anchors, matching, loss, decode, NMS.

Boxes are center-form (cx, cy, w, h) in normalized [0, 1] image coordinates
throughout.  Anchor order is pinned — scale-major, then row-major over cells,
then aspect-major within a cell — and every flat tensor in this module aligns
with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fsnet.errors import ConfigError, TrainingError

__all__ = [
    "Box",
    "AnchorSet",
    "MatchAssignment",
    "Detection",
    "RawPredictions",
    "iou",
    "iou_matrix",
    "generate_anchors",
    "match",
    "encode_targets",
    "decode_boxes",
    "ssd_loss",
    "ssd_loss_grad",
    "decode",
    "nms",
]

# offset-encoding variances and loss/NMS constants, SSD convention
VAR_CENTER = 0.1
VAR_SIZE = 0.2
NEG_POS_RATIO = 3
LOC_ALPHA = 1.0
ASPECTS = (1.0, 2.0, 0.5)


@dataclass(frozen=True)
class Box:
    """Center-form box; the center must lie on the image, edges may not."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"box size must be positive: {self}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ConfigError(f"box center must be within [0, 1]: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _as_boxes(boxes) -> np.ndarray:
    """Accept (N, 4) array, Box, or a sequence of Box; return (N, 4) f64."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64)
        if arr.ndim == 1:
            arr = arr[None]
    else:
        arr = np.array([b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ConfigError(f"expected (N, 4) boxes, got {arr.shape}")
    return arr


def _corners(b: np.ndarray) -> np.ndarray:
    out = np.empty_like(b)
    out[:, 0] = b[:, 0] - b[:, 2] / 2
    out[:, 1] = b[:, 1] - b[:, 3] / 2
    out[:, 2] = b[:, 0] + b[:, 2] / 2
    out[:, 3] = b[:, 1] + b[:, 3] / 2
    return out


def iou_matrix(a, b) -> np.ndarray:
    """(N, M) pairwise intersection-over-union of center-form boxes."""
    ca = _corners(_as_boxes(a))
    cb = _corners(_as_boxes(b))
    x1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


@dataclass(frozen=True)
class AnchorSet:
    """All anchors for a head configuration, in the pinned order.

    `scale_of`, `cell_of`, `aspect_of` record each anchor's provenance.
    """

    boxes: np.ndarray  # (N, 4) center-form
    head_scales: tuple
    num_aspects: int
    scale_of: np.ndarray = field(repr=False)
    cell_of: np.ndarray = field(repr=False)  # (N, 2) row, col
    aspect_of: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.boxes.shape[0]


def generate_anchors(head_scales, aspects=ASPECTS, scale_range=(0.2, 0.9)) -> AnchorSet:
    """Anchor grid per head scale.

    `head_scales` is a list of feature-map extents, one per head, each an int
    (square map) or (H, W) pair.  Box scale s_k interpolates linearly over
    `scale_range`; per aspect ratio r, the box is (s*sqrt(r), s/sqrt(r)).
    """
    shapes = [(s, s) if isinstance(s, int) else tuple(s) for s in head_scales]
    if not shapes or any(h < 1 or w < 1 for h, w in shapes):
        raise ConfigError(f"invalid head scales: {head_scales}")
    sk = np.linspace(scale_range[0], scale_range[1], len(shapes))
    boxes, scale_of, cells, aspect_of = [], [], [], []
    for k, (h, w) in enumerate(shapes):
        for row in range(h):
            for col in range(w):
                cx = (col + 0.5) / w
                cy = (row + 0.5) / h
                for a, r in enumerate(aspects):
                    boxes.append((cx, cy, sk[k] * np.sqrt(r), sk[k] / np.sqrt(r)))
                    scale_of.append(k)
                    cells.append((row, col))
                    aspect_of.append(a)
    return AnchorSet(
        boxes=np.array(boxes, dtype=np.float64),
        head_scales=tuple(shapes),
        num_aspects=len(aspects),
        scale_of=np.array(scale_of, dtype=np.int64),
        cell_of=np.array(cells, dtype=np.int64),
        aspect_of=np.array(aspect_of, dtype=np.int64),
    )


@dataclass
class MatchAssignment:
    """Per-anchor class label (0 = background) and matched gt index (-1 = none)."""

    labels: np.ndarray
    gt_index: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels > 0))


def match(anchors: AnchorSet, gt_boxes, gt_labels, threshold: float = 0.5) -> MatchAssignment:
    """Assign anchors to ground truth.

    An anchor is positive when its best-IoU ground truth clears `threshold`;
    additionally every ground truth (in index order) claims its best still
    unclaimed anchor so none goes unmatched.  Ties break to the lower index.
    """
    gt = _as_boxes(gt_boxes)
    labels_in = np.asarray(gt_labels, dtype=np.int64)
    if gt.shape[0] != labels_in.shape[0]:
        raise ConfigError(f"{gt.shape[0]} gt boxes vs {labels_in.shape[0]} labels")
    if np.any(labels_in < 1):
        raise ConfigError("gt class labels must be >= 1")
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    if gt.shape[0] == 0:
        return MatchAssignment(labels, gt_index)
    overlap = iou_matrix(anchors.boxes, gt)  # (N, M)
    best_gt = overlap.argmax(axis=1)  # argmax takes the lower index on ties
    best_iou = overlap[np.arange(n), best_gt]
    pos = best_iou >= threshold
    labels[pos] = labels_in[best_gt[pos]]
    gt_index[pos] = best_gt[pos]
    claimed = np.zeros(n, dtype=bool)
    for j in range(gt.shape[0]):
        free = ~claimed
        if not free.any():
            break
        col = np.where(free, overlap[:, j], -1.0)
        i = int(col.argmax())
        claimed[i] = True
        labels[i] = labels_in[j]
        gt_index[i] = j
    return MatchAssignment(labels, gt_index)


def encode_targets(assignment: MatchAssignment, anchors: AnchorSet, gt_boxes) -> np.ndarray:
    """(N, 4) regression targets; zero rows for background anchors."""
    gt = _as_boxes(gt_boxes)
    out = np.zeros((len(anchors), 4), dtype=np.float64)
    pos = assignment.labels > 0
    if not pos.any():
        return out
    a = anchors.boxes[pos]
    g = gt[assignment.gt_index[pos]]
    out[pos, 0] = (g[:, 0] - a[:, 0]) / a[:, 2] / VAR_CENTER
    out[pos, 1] = (g[:, 1] - a[:, 1]) / a[:, 3] / VAR_CENTER
    out[pos, 2] = np.log(g[:, 2] / a[:, 2]) / VAR_SIZE
    out[pos, 3] = np.log(g[:, 3] / a[:, 3]) / VAR_SIZE
    return out


def decode_boxes(loc: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    """Inverse of the offset encoding; (N, 4) center-form, unclipped."""
    a = anchors.boxes
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] + loc[:, 0] * VAR_CENTER * a[:, 2]
    out[:, 1] = a[:, 1] + loc[:, 1] * VAR_CENTER * a[:, 3]
    out[:, 2] = a[:, 2] * np.exp(loc[:, 2] * VAR_SIZE)
    out[:, 3] = a[:, 3] * np.exp(loc[:, 3] * VAR_SIZE)
    return out


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise ConfigError(f"detection class_id must be >= 1: {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ConfigError(f"detection score must be in [0, 1]: {self.score}")


@dataclass
class RawPredictions:
    """Unnormalized head outputs, one (loc, conf) pair per head scale.

    loc is (4A, H, W) with channel a*4+coord; conf is ((C+1)A, H, W) with
    channel a*(C+1)+cls.  Flattened, anchors land in the pinned global order.
    """

    scales: list
    num_classes: int

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1: {self.num_classes}")
        for i, (loc, conf) in enumerate(self.scales):
            if loc.ndim != 3 or conf.ndim != 3 or loc.shape[1:] != conf.shape[1:]:
                raise ConfigError(f"scale {i}: loc {loc.shape} vs conf {conf.shape}")
            if loc.shape[0] % 4:
                raise ConfigError(f"scale {i}: loc channels {loc.shape[0]} not divisible by 4")
            a = loc.shape[0] // 4
            if conf.shape[0] != a * (self.num_classes + 1):
                raise ConfigError(
                    f"scale {i}: conf channels {conf.shape[0]} != {a}*({self.num_classes}+1)"
                )

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, 4) loc and (N, C+1) conf in global anchor order."""
        locs, confs = [], []
        for loc, conf in self.scales:
            a = loc.shape[0] // 4
            h, w = loc.shape[1:]
            locs.append(loc.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4))
            confs.append(
                conf.reshape(a, self.num_classes + 1, h, w)
                .transpose(2, 3, 0, 1)
                .reshape(-1, self.num_classes + 1)
            )
        return np.concatenate(locs), np.concatenate(confs)

    def scatter_flat(self, loc_flat: np.ndarray, conf_flat: np.ndarray) -> list:
        """Inverse of flat(): split per scale and restore channel layout."""
        out = []
        start = 0
        for loc, conf in self.scales:
            a = loc.shape[0] // 4
            h, w = loc.shape[1:]
            n = h * w * a
            gl = loc_flat[start : start + n].reshape(h, w, a, 4).transpose(2, 3, 0, 1)
            gc = (
                conf_flat[start : start + n]
                .reshape(h, w, a, self.num_classes + 1)
                .transpose(2, 3, 0, 1)
            )
            out.append((gl.reshape(loc.shape), gc.reshape(conf.shape)))
            start += n
        return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _loss_impl(raw: RawPredictions, assignment: MatchAssignment, loc_targets: np.ndarray):
    loc_flat, conf_flat = raw.flat()
    if not (np.all(np.isfinite(loc_flat)) and np.all(np.isfinite(conf_flat))):
        raise TrainingError("non-finite detector logits")
    loc64 = loc_flat.astype(np.float64)
    conf64 = conf_flat.astype(np.float64)
    pos = assignment.labels > 0
    n_pos = int(np.count_nonzero(pos))
    gl = np.zeros_like(loc64)
    gc = np.zeros_like(conf64)
    if n_pos == 0:
        return 0.0, 0.0, 0.0, gl, gc
    diff = loc64[pos] - loc_targets[pos]
    loc_sum = float(_smooth_l1(diff).sum())
    gl[pos] = np.clip(diff, -1.0, 1.0) / n_pos

    probs = _softmax(conf64)
    ce = -np.log(np.clip(probs[np.arange(len(probs)), assignment.labels], 1e-300, None))
    neg = ~pos
    neg_idx = np.where(neg)[0]
    take = min(NEG_POS_RATIO * n_pos, len(neg_idx))
    # stable sort keeps lower anchor index first among equal losses
    order = np.argsort(-ce[neg_idx], kind="stable")
    mined = neg_idx[order[:take]]
    conf_sum = float(ce[pos].sum() + ce[mined].sum())

    sel = np.concatenate([np.where(pos)[0], mined])
    onehot = np.zeros((len(sel), conf64.shape[1]))
    onehot[np.arange(len(sel)), assignment.labels[sel]] = 1.0
    gc[sel] = (probs[sel] - onehot) / n_pos

    loc_comp = loc_sum / n_pos
    conf_comp = conf_sum / n_pos
    total = conf_comp + LOC_ALPHA * loc_comp
    return total, loc_comp, conf_comp, gl * LOC_ALPHA, gc


def ssd_loss(raw: RawPredictions, assignment: MatchAssignment, loc_targets: np.ndarray):
    """(total, loc_component, conf_component).

    total = (conf + loc) / N over N positive anchors; conf counts positives
    plus the 3N hardest negatives; N = 0 collapses everything to zero.
    """
    total, loc_comp, conf_comp, _, _ = _loss_impl(raw, assignment, loc_targets)
    return total, loc_comp, conf_comp


def ssd_loss_grad(raw: RawPredictions, assignment: MatchAssignment, loc_targets: np.ndarray):
    """Loss components plus d(total)/d(raw) as per-scale (grad_loc, grad_conf)."""
    total, loc_comp, conf_comp, gl, gc = _loss_impl(raw, assignment, loc_targets)
    return (total, loc_comp, conf_comp), raw.scatter_flat(gl, gc)


def decode(raw: RawPredictions, anchors: AnchorSet, score_threshold: float = 0.01) -> list:
    """Per-class detections with score strictly above the threshold, pre-NMS.

    Boxes are corner-clipped to [0, 1]; a box that clips away entirely is
    dropped.
    """
    loc_flat, conf_flat = raw.flat()
    if loc_flat.shape[0] != len(anchors):
        raise ConfigError(f"{loc_flat.shape[0]} predictions vs {len(anchors)} anchors")
    scores = _softmax(conf_flat.astype(np.float64))
    corners = np.clip(_corners(decode_boxes(loc_flat.astype(np.float64), anchors)), 0.0, 1.0)
    w = corners[:, 2] - corners[:, 0]
    h = corners[:, 3] - corners[:, 1]
    alive = (w > 0) & (h > 0)
    dets = []
    for cls in range(1, raw.num_classes + 1):
        for i in np.where(alive & (scores[:, cls] > score_threshold))[0]:
            box = Box(
                cx=float(corners[i, 0] + w[i] / 2),
                cy=float(corners[i, 1] + h[i] / 2),
                w=float(w[i]),
                h=float(h[i]),
            )
            dets.append(Detection(box=box, class_id=cls, score=float(scores[i, cls])))
    return dets


def nms(dets: list, iou_threshold: float = 0.45, top_k: int = 200) -> list:
    """Greedy per-class suppression at IoU strictly above the threshold.

    Score ties break to the lower original index; at most `top_k` survivors
    overall, best scores first.
    """
    survivors = []
    for cls in sorted({d.class_id for d in dets}):
        idx = [i for i, d in enumerate(dets) if d.class_id == cls]
        idx.sort(key=lambda i: (-dets[i].score, i))
        boxes = _as_boxes([dets[i].box for i in idx]) if idx else np.zeros((0, 4))
        removed = [False] * len(idx)
        for a in range(len(idx)):
            if removed[a]:
                continue
            survivors.append(idx[a])
            keep_box = boxes[a : a + 1]
            for b in range(a + 1, len(idx)):
                if not removed[b] and iou_matrix(keep_box, boxes[b : b + 1])[0, 0] > iou_threshold:
                    removed[b] = True
    survivors.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in survivors[:top_k]]
