from fractions import Fraction

import numpy as np
import pytest

from lfyolo.errors import ValidationError
from lfyolo.evaluate import EvalRecord, ap50, average_precision, gt_boxes, map50, match
from lfyolo.model import Detection

from oracles import ap_threshold_enumeration


def det(cls, score, box):
    return Detection(cls, score, tuple(float(v) for v in box))


def records_from(images):
    return [EvalRecord(str(k), [det(*d) for d in dets], list(gts)) for k, (dets, gts) in enumerate(images)]


def test_iou_exactly_half_is_true_positive():
    # [0,0,2,1] vs [0,0,1,1]: intersection 1, union 2
    assert match([det(0, 0.9, (0, 0, 2, 1))], [(0, (0, 0, 1, 1))]) == [True]
    assert match([det(0, 0.9, (0, 0, 2.01, 1))], [(0, (0, 0, 1, 1))]) == [False]


def test_hand_worked_precision_recall():
    # ranks: TP, FP, TP with 2 GTs -> P = 1, 1/2, 2/3 at R = 1/2, 1/2, 1
    gts = [(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))]
    dets = [det(0, 0.9, (0, 0, 10, 10)), det(0, 0.8, (50, 50, 60, 60)), det(0, 0.7, (20, 20, 30, 30))]
    ap = ap50([EvalRecord("a", dets, gts)], 0)
    assert ap == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-12)
    assert ap == pytest.approx(5 / 6, abs=1e-12)


def test_two_gt_precision_envelope():
    # TP, FP, TP on 2 GTs -> 0.5*1 + 0.5*(2/3); TP, TP -> 1.0; FP, TP, FP, TP -> 0.5*0.5 + 0.5*0.5
    assert average_precision([3, 2, 1], [True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision([2, 1], [True, True], 2) == 1.0
    assert average_precision([4, 3, 2, 1], [False, True, False, True], 2) == pytest.approx(0.5, abs=1e-12)


def test_second_detection_on_same_gt_is_fp():
    gts = [(0, (0, 0, 10, 10))]
    dets = [det(0, 0.9, (0, 0, 10, 10)), det(0, 0.8, (0, 0, 10, 10.5))]
    assert match(dets, gts) == [True, False]
    assert ap50([EvalRecord("a", dets, gts)], 0) == 1.0


def test_unmatched_gt_lowers_recall():
    gts = [(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))]
    assert ap50([EvalRecord("a", [det(0, 0.9, (0, 0, 10, 10))], gts)], 0) == pytest.approx(0.5)


def test_tied_scores_enter_together():
    assert average_precision([1.0, 1.0], [False, True], 1) == average_precision([1.0, 1.0], [True, False], 1)
    assert average_precision([1.0, 1.0], [True, False], 1) == pytest.approx(0.5)


def random_images(rng, n_images, n_classes=2):
    images = []
    for _ in range(n_images):
        gts = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.integers(0, 40, 2)
            w, h = rng.integers(4, 16, 2)
            gts.append((int(rng.integers(0, n_classes)), (int(x), int(y), int(x + w), int(y + h))))
        dets = []
        for g in gts:
            if rng.random() < 0.7:
                jit = rng.integers(-3, 4, 4)
                box = tuple(int(v) for v in np.array(g[1]) + jit)
                if box[2] > box[0] and box[3] > box[1]:
                    dets.append((g[0], round(float(rng.random()), 3), box))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.integers(0, 40, 2)
            dets.append((int(rng.integers(0, n_classes)), round(float(rng.random()), 3),
                         (int(x), int(y), int(x + 8), int(y + 8))))
        images.append((dets, gts))
    return images


def test_matches_threshold_enumeration_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(60):
        images = random_images(rng, int(rng.integers(1, 5)))
        recs = records_from(images)
        for c in range(2):
            ours = ap50(recs, c)
            if ours is None:
                assert not any(g[0] == c for _, gts in images for g in gts)
                continue
            assert abs(ours - float(ap_threshold_enumeration(images, c))) < 1e-12
            checked += 1
    assert checked > 50


def test_monotone_score_rescaling_is_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        images = random_images(rng, 3)
        scaled = [([(c, s ** 3 * 0.5, b) for c, s, b in dets], gts) for dets, gts in images]
        a, b = records_from(images), records_from(scaled)
        for c in range(2):
            assert ap50(a, c) == ap50(b, c)


def test_low_scored_fp_never_raises_ap():
    rng = np.random.default_rng(2)
    for _ in range(20):
        images = random_images(rng, 3)
        base = records_from(images)
        images[0][0].append((0, -1.0, (100, 100, 110, 110)))
        worse = records_from(images)
        if ap50(base, 0) is not None:
            assert ap50(worse, 0) <= ap50(base, 0) + 1e-15


def test_perfect_top_ranked_detections_give_one():
    images = [([(0, 0.9, (0, 0, 10, 10)), (0, 0.1, (50, 50, 60, 60))], [(0, (0, 0, 10, 10))])]
    assert ap50(records_from(images), 0) == 1.0


def test_class_without_ground_truth_is_excluded():
    recs = [EvalRecord("a", [det(1, 0.9, (0, 0, 5, 5))], [(0, (0, 0, 10, 10))])]
    assert ap50(recs, 1) is None
    rep = map50(recs, num_classes=3)
    assert rep.per_class[0] == 0.0 and rep.per_class[1] is None and rep.skipped == [1, 2]
    assert rep.mean == 0.0
    assert "excluded" in rep.to_text()


def test_no_evaluable_class_raises():
    with pytest.raises(ValidationError):
        map50([EvalRecord("a", [det(0, 0.5, (0, 0, 1, 1))], [])], num_classes=2)
    with pytest.raises(ValidationError):
        average_precision([], [], 0)


def test_report_formats():
    recs = [EvalRecord("a", [det(0, 0.9, (0, 0, 10, 10))], [(0, (0, 0, 10, 10)), (1, (0, 0, 4, 4))])]
    rep = map50(recs, num_classes=2, class_names=["pore", "crack"])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "class,AP50"
    assert lines[1] == "pore,1.0" and lines[2] == "crack,0.0"
    assert lines[-1] == "mAP50,0.5"


def test_mean_is_unweighted_over_classes():
    recs = [EvalRecord("a", [det(0, 0.9, (0, 0, 10, 10))],
                       [(0, (0, 0, 10, 10)), (1, (0, 0, 4, 4)), (1, (5, 5, 9, 9)), (1, (20, 20, 24, 24))])]
    assert map50(recs, 2).mean == pytest.approx(0.5)


def test_gt_boxes_to_pixels():
    assert gt_boxes([(2, 0.5, 0.5, 0.5, 0.25)], (64, 128)) == [(2, (32.0, 24.0, 96.0, 40.0))]


def test_exact_fraction_of_hand_case():
    images = [([(0, 0.9, (0, 0, 10, 10)), (0, 0.8, (50, 50, 60, 60)), (0, 0.7, (20, 20, 30, 30))],
               [(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))])]
    assert ap_threshold_enumeration(images, 0) == Fraction(5, 6)


def test_top_ranked_tp_never_lowers_ap():
    rng = np.random.default_rng(3)
    for _ in range(30):
        images = random_images(rng, 3)
        base = ap50(records_from(images), 0)
        images[1][1].append((0, (200, 200, 210, 210)))
        images[1][0].append((0, 2.0, (200, 200, 210, 210)))
        better = ap50(records_from(images), 0)
        if base is not None:
            assert better >= base - 1e-15


def test_three_class_mean_matches_per_class_oracle():
    rng = np.random.default_rng(4)
    images = random_images(rng, 6, n_classes=3)
    for c in range(3):
        images[0][1].append((c, (100 + 20 * c, 100, 110 + 20 * c, 110)))
    rep = map50(records_from(images), 3)
    expected = np.mean([float(ap_threshold_enumeration(images, c)) for c in range(3)])
    assert abs(rep.mean - expected) < 1e-12
