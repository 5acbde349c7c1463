"""Metric oracles: greedy matching, P/R/F arithmetic, AP envelope, presence."""

import json

import numpy as np
import pytest

from fsnet.data import AnnotatedBox
from fsnet.errors import DataError
from fsnet.evaluate import (
    EvalRecord,
    PrCurve,
    average_precision,
    build_records,
    map_score,
    match_detections,
    pr_curve,
    precision_recall_f,
    presence_ap,
    write_report,
)


def box(label, cx, cy, w=0.1, h=0.1, score=None):
    return AnnotatedBox(label, cx, cy, w, h, score)


def rec(dets, gts, frame=1, video=""):
    return EvalRecord(frame=frame, detections=tuple(dets), truths=tuple(gts), video=video)


# ----------------------------------------------------------------- oracles
# Deliberately naive re-implementations of the stated rules, used to cross
# check the production code on random instances.

def corner_iou(a, b):
    ax1, ay1 = a.cx - a.w / 2, a.cy - a.h / 2
    ax2, ay2 = a.cx + a.w / 2, a.cy + a.h / 2
    bx1, by1 = b.cx - b.w / 2, b.cy - b.h / 2
    bx2, by2 = b.cx + b.w / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def greedy_match_oracle(dets, gts, thr):
    def score(d):
        return 1.0 if d.score is None else d.score

    tp = [False] * len(dets)
    used = [False] * len(gts)
    for i in sorted(range(len(dets)), key=lambda i: (-score(dets[i]), i)):
        cands = [
            (corner_iou(dets[i], g), j)
            for j, g in enumerate(gts)
            if not used[j] and g.label == dets[i].label
        ]
        cands = [(v, j) for v, j in cands if v >= thr]
        if not cands:
            continue
        best = max(v for v, _ in cands)
        j = min(j for v, j in cands if v == best)
        tp[i], used[j] = True, True
    return tp


def ap_oracle(ranked_hits, n_pos):
    """All-point AP as mean over TP ranks of the forward-max precision."""
    prec = []
    tp = 0
    for k, hit in enumerate(ranked_hits, 1):
        tp += int(hit)
        prec.append(tp / k)
    return sum(max(prec[k:]) for k, hit in enumerate(ranked_hits) if hit) / n_pos


def random_records(rng, n_frames, classes, video=""):
    out = []
    for t in range(1, n_frames + 1):
        gts, dets = [], []
        for _ in range(rng.integers(0, 4)):
            gts.append(box(rng.choice(classes), *rng.uniform(0.2, 0.8, 2),
                           *rng.uniform(0.08, 0.3, 2)))
        for g in gts:
            if rng.random() < 0.7:  # noisy copy of a gt box
                dets.append(box(g.label, g.cx + rng.uniform(-0.05, 0.05),
                                g.cy + rng.uniform(-0.05, 0.05), g.w, g.h,
                                float(rng.uniform(0.05, 1.0))))
        for _ in range(rng.integers(0, 3)):  # unrelated detections
            dets.append(box(rng.choice(classes), *rng.uniform(0.2, 0.8, 2),
                            *rng.uniform(0.08, 0.3, 2),
                            float(rng.uniform(0.05, 1.0))))
        out.append(rec(dets, gts, frame=t, video=video))
    return out


def oracle_ap(records, cls, thr):
    pooled = []
    n_pos = 0
    for idx, r in enumerate(records):
        flags = greedy_match_oracle(r.detections, r.truths, thr)
        n_pos += sum(1 for g in r.truths if g.label == cls)
        pooled += [
            (1.0 if d.score is None else d.score, hit, idx)
            for d, hit in zip(r.detections, flags)
            if d.label == cls
        ]
    pooled.sort(key=lambda p: (-p[0], p[2]))
    return ap_oracle([hit for _, hit, _ in pooled], n_pos)


# ------------------------------------------------------------------ matching

class TestMatchDetections:
    def test_identical_box_is_tp(self):
        g = box("hand", 0.5, 0.5)
        assert match_detections(rec([g], [g])) == [True]

    def test_two_preds_one_gt(self):
        g = box("hand", 0.5, 0.5)
        d_hi = box("hand", 0.5, 0.5, score=0.9)
        d_lo = box("hand", 0.51, 0.5, score=0.3)
        assert match_detections(rec([d_lo, d_hi], [g])) == [False, True]

    def test_wrong_class_never_matches(self):
        g = box("hand", 0.5, 0.5)
        d = box("cup", 0.5, 0.5, score=0.9)
        assert match_detections(rec([d], [g])) == [False]

    def test_iou_threshold_inclusive(self):
        g = box("hand", 0.5, 0.5, 0.2, 0.2)
        d = box("hand", 0.5, 0.5, 0.2, 0.1, score=0.9)  # IoU exactly 0.5
        assert match_detections(rec([d], [g]), iou_threshold=0.5) == [True]

    def test_missing_score_ranks_first(self):
        g = box("hand", 0.5, 0.5)
        d_none = box("hand", 0.5, 0.5)
        d_low = box("hand", 0.5, 0.5, score=0.99)
        assert match_detections(rec([d_low, d_none], [g])) == [False, True]

    def test_empty_sides(self):
        g = box("hand", 0.5, 0.5)
        assert match_detections(rec([], [g])) == []
        assert match_detections(rec([g], [])) == [False]

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(41)
        classes = ("hand", "cup", "phone")
        for _ in range(200):
            gts = [box(rng.choice(classes), *rng.uniform(0.2, 0.8, 2),
                       *rng.uniform(0.08, 0.35, 2)) for _ in range(rng.integers(0, 4))]
            dets = [box(rng.choice(classes), *rng.uniform(0.2, 0.8, 2),
                        *rng.uniform(0.08, 0.35, 2), float(rng.uniform(0, 1)))
                    for _ in range(rng.integers(0, 6))]
            r = rec(dets, gts)
            assert match_detections(r) == greedy_match_oracle(dets, gts, 0.5)


# --------------------------------------------------------------------- P/R/F

class TestPrecisionRecallF:
    def test_all_correct(self):
        g = [box("hand", 0.3, 0.3), box("cup", 0.7, 0.7)]
        rep = precision_recall_f([rec(g, g)])
        assert (rep.precision, rep.recall, rep.f_measure) == (1.0, 1.0, 1.0)

    def test_no_predictions(self):
        rep = precision_recall_f([rec([], [box("hand", 0.5, 0.5)])])
        assert (rep.precision, rep.recall, rep.f_measure) == (0.0, 0.0, 0.0)

    def test_worked_example(self):
        # TP=3, FP=1, FN=2 -> P 0.75, R 0.6, F 2/3
        gts = [box("hand", x, 0.5) for x in (0.1, 0.3, 0.5, 0.7, 0.9)]
        dets = [box("hand", x, 0.5, score=0.8) for x in (0.1, 0.3, 0.5)]
        dets.append(box("hand", 0.5, 0.1, score=0.8))
        rep = precision_recall_f([rec(dets, gts)])
        assert rep.precision == pytest.approx(0.75)
        assert rep.recall == pytest.approx(0.6)
        assert rep.f_measure == pytest.approx(2 / 3)

    def test_per_video_mean_and_std(self):
        g = box("hand", 0.5, 0.5)
        records = [
            rec([g], [g], frame=1, video="a"),                          # P=R=1
            rec([g, box("hand", 0.1, 0.1, score=0.2)], [g], 1, "b"),    # P=.5 R=1
        ]
        rep = precision_recall_f(records)
        assert rep.per_video["a"][0] == 1.0
        assert rep.per_video["b"][0] == 0.5
        assert rep.mean[0] == pytest.approx(0.75)
        assert rep.std[0] == pytest.approx(0.25)  # population std
        assert rep.precision == pytest.approx(2 / 3)  # micro, not macro

    def test_empty_and_duplicate_records(self):
        with pytest.raises(DataError):
            precision_recall_f([])
        g = box("hand", 0.5, 0.5)
        with pytest.raises(DataError, match="duplicate"):
            precision_recall_f([rec([g], [g], frame=1), rec([g], [g], frame=1)])


# ------------------------------------------------------------------------ AP

class TestAveragePrecision:
    def test_single_correct_pred(self):
        g = box("hand", 0.5, 0.5)
        assert average_precision([rec([g], [g])], "hand") == 1.0

    def test_tp_then_fp_is_one(self):
        g = box("hand", 0.5, 0.5)
        dets = [box("hand", 0.5, 0.5, score=0.9), box("hand", 0.1, 0.1, score=0.8)]
        assert average_precision([rec(dets, [g])], "hand") == 1.0

    def test_fp_then_tp_is_half(self):
        g = box("hand", 0.5, 0.5)
        dets = [box("hand", 0.1, 0.1, score=0.9), box("hand", 0.5, 0.5, score=0.8)]
        assert average_precision([rec(dets, [g])], "hand") == 0.5

    def test_missed_gt_caps_recall(self):
        gts = [box("hand", 0.2, 0.2), box("hand", 0.8, 0.8)]
        dets = [box("hand", 0.2, 0.2, score=0.9)]
        assert average_precision([rec(dets, gts)], "hand") == 0.5

    def test_no_ground_truth_raises(self):
        with pytest.raises(DataError, match="no ground-truth"):
            average_precision([rec([box("cup", 0.5, 0.5, score=0.5)], [])], "cup")

    def test_matches_bruteforce_on_random_record_sets(self):
        rng = np.random.default_rng(42)
        classes = ("hand", "cup")
        checked = 0
        for trial in range(150):
            records = random_records(rng, int(rng.integers(1, 6)), classes)
            for cls in classes:
                if not any(g.label == cls for r in records for g in r.truths):
                    continue
                want = oracle_ap(records, cls, 0.5)
                assert average_precision(records, cls) == pytest.approx(want, abs=1e-12)
                checked += 1
        assert checked >= 100

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(7)
        records = random_records(rng, 8, ("hand",))
        if not any(g.label == "hand" for r in records for g in r.truths):
            pytest.skip("degenerate draw")
        base = average_precision(records, "hand")

        def squash(r):
            dets = tuple(
                AnnotatedBox(d.label, d.cx, d.cy, d.w, d.h, d.score**3 if d.score else d.score)
                for d in r.detections
            )
            return EvalRecord(r.frame, dets, r.truths, r.video)

        assert average_precision([squash(r) for r in records], "hand") == pytest.approx(
            base, abs=1e-12
        )

    def test_in_unit_interval(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            records = random_records(rng, int(rng.integers(1, 5)), ("hand",))
            if not any(g.label == "hand" for r in records for g in r.truths):
                continue
            assert 0.0 <= average_precision(records, "hand") <= 1.0


class TestMapScore:
    def test_mean_of_per_class(self):
        g1, g2 = box("hand", 0.3, 0.3), box("cup", 0.7, 0.7)
        records = [rec([g1, box("cup", 0.1, 0.1, score=0.9)], [g1, g2])]
        mean_ap, per_class, skipped = map_score(records, ("hand", "cup"))
        assert per_class["hand"] == 1.0
        assert per_class["cup"] == 0.0
        assert mean_ap == 0.5
        assert skipped == []

    def test_skips_classes_without_gt(self):
        g = box("hand", 0.5, 0.5)
        mean_ap, per_class, skipped = map_score([rec([g], [g])], ("hand", "cup"))
        assert mean_ap == 1.0
        assert list(per_class) == ["hand"]
        assert skipped == ["cup"]

    def test_all_skipped_raises(self):
        with pytest.raises(DataError, match="mAP undefined"):
            map_score([rec([], [box("hand", 0.5, 0.5)])], ("cup",))


class TestPrCurveShape:
    def test_points_are_threshold_recall_precision(self):
        g = box("hand", 0.5, 0.5)
        dets = [box("hand", 0.5, 0.5, score=0.9), box("hand", 0.1, 0.1, score=0.4)]
        curve = pr_curve([rec(dets, [g])], "hand")
        assert curve.points == ((0.9, 1.0, 1.0), (0.4, 1.0, 0.5))

    def test_recall_must_be_nondecreasing(self):
        with pytest.raises(DataError, match="non-decreasing"):
            PrCurve(((0.9, 0.5, 1.0), (0.4, 0.25, 1.0)))


# ------------------------------------------------------------------ presence

class TestPresenceAp:
    def test_frame_score_is_best_detection(self):
        g = box("cup", 0.5, 0.5)
        dets = [box("cup", 0.2, 0.2, score=0.4), box("cup", 0.8, 0.8, score=0.9)]
        records = [rec(dets, [g], frame=1), rec([], [], frame=2)]
        _, per_class, _ = presence_ap(records, ("cup",))
        assert per_class["cup"] == 1.0  # 0.9 on the positive frame beats the 0.0

    def test_perfect_ranking(self):
        records = [
            rec([box("cup", 0.5, 0.5, score=0.8)], [box("cup", 0.4, 0.4)], frame=1),
            rec([box("cup", 0.5, 0.5, score=0.3)], [], frame=2),
        ]
        mean_ap, per_class, skipped = presence_ap(records, ("cup",))
        assert per_class["cup"] == 1.0

    def test_location_ignored(self):
        # detection nowhere near the gt still counts for presence
        records = [
            rec([box("cup", 0.9, 0.9, 0.05, 0.05, score=0.8)], [box("cup", 0.1, 0.1)], 1),
            rec([], [], frame=2),
        ]
        _, per_class, _ = presence_ap(records, ("cup",))
        assert per_class["cup"] == 1.0

    def test_crafted_four_frame_ranking(self):
        def frame(score, present, t):
            dets = [box("cup", 0.5, 0.5, score=score)] if score else []
            gts = [box("cup", 0.5, 0.5)] if present else []
            return rec(dets, gts, frame=t)

        records = [
            frame(0.9, True, 1),
            frame(0.8, False, 2),
            frame(0.6, True, 3),
            frame(None, False, 4),  # no detection -> presence score 0
        ]
        # ranked hits: [1, 0, 1, 0]; oracle over 2 positives
        want = ap_oracle([True, False, True, False], 2)
        _, per_class, _ = presence_ap(records, ("cup",))
        assert per_class["cup"] == pytest.approx(want)
        assert want == pytest.approx((1.0 + 2 / 3) / 2)

    def test_never_present_class_skipped(self):
        records = [rec([box("cup", 0.5, 0.5, score=0.4)], [box("hand", 0.5, 0.5)], 1)]
        mean_ap, per_class, skipped = presence_ap(records, ("hand", "cup"))
        assert skipped == ["cup"]
        assert list(per_class) == ["hand"]
        with pytest.raises(DataError, match="ever present"):
            presence_ap(records, ("cup",))

    def test_matches_bruteforce_on_random_sets(self):
        rng = np.random.default_rng(11)
        classes = ("hand", "cup")
        checked = 0
        for _ in range(120):
            records = random_records(rng, int(rng.integers(2, 8)), classes)
            for cls in classes:
                scores = [
                    max((1.0 if d.score is None else d.score
                         for d in r.detections if d.label == cls), default=0.0)
                    for r in records
                ]
                labels = [any(g.label == cls for g in r.truths) for r in records]
                if not any(labels):
                    continue
                order = sorted(range(len(records)), key=lambda i: (-scores[i], i))
                want = ap_oracle([labels[i] for i in order], sum(labels))
                _, per_class, _ = presence_ap(records, (cls,))
                assert per_class[cls] == pytest.approx(want, abs=1e-12)
                checked += 1
        assert checked >= 100


# ----------------------------------------------------------------- plumbing

class TestBuildRecords:
    def test_union_of_frames(self):
        g = box("hand", 0.5, 0.5)
        records = build_records({2: [g]}, {1: [g], 2: [g]}, video="v")
        assert [r.frame for r in records] == [1, 2]
        assert records[0].detections == ()
        assert records[0].truths == (g,)
        assert records[1].video == "v"


class TestWriteReport:
    def test_round_trip_and_curves(self, tmp_path):
        g = box("hand", 0.5, 0.5)
        records = [rec([g], [g])]
        mean_ap, per_class, skipped = map_score(records, ("hand",))
        metrics = {"map": mean_ap, "per_class": per_class, "skipped": skipped}
        write_report(metrics, {"hand": pr_curve(records, "hand")}, tmp_path)
        loaded = json.loads((tmp_path / "report.json").read_text())
        assert loaded == {"map": 1.0, "per_class": {"hand": 1.0}, "skipped": []}
        lines = (tmp_path / "pr_hand.csv").read_text().splitlines()
        assert lines[0] == "threshold,recall,precision"
        assert lines[1] == "1.0,1.0,1.0"

    def test_empty_curve_header_only(self, tmp_path):
        write_report({}, {"cup": PrCurve(())}, tmp_path)
        assert (tmp_path / "pr_cup.csv").read_text() == "threshold,recall,precision\n"

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("x")
        with pytest.raises(DataError, match="cannot write report"):
            write_report({}, {}, blocker / "sub")
