import itertools
import json
import math

import numpy as np
import pytest

from memdistill.errors import DegenerateInputError, InvalidInputError
from memdistill.metrics import (
    DegenerateBaselineError,
    DetectionSet,
    GroundTruth,
    MetricReport,
    Prediction,
    RobustnessInput,
    average_precision,
    confusion_matrix,
    corruption_error,
    interpolated_ap,
    iou_per_class,
    mean_average_precision,
    miou,
    nds,
    resilience_rate,
    segmentation_report,
)


def test_perfect_prediction():
    labels = [0, 1, 2, 1]
    assert miou(confusion_matrix(labels, labels, 3)) == 1.0


def test_absent_class_excluded():
    cm = confusion_matrix([0, 0, 1], [0, 0, 1], 3)
    iou = iou_per_class(cm)
    assert math.isnan(iou[2])
    assert miou(cm) == 1.0


def test_hand_iou():
    # class 0: tp 1, fp 1, fn 1 -> 1/3 ; class 1: tp 1, fp 1, fn 1 -> 1/3
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 0, 1], 2)
    assert np.allclose(iou_per_class(cm), [1 / 3, 1 / 3], atol=1e-15)


def test_label_out_of_range():
    with pytest.raises(InvalidInputError):
        confusion_matrix([0, 3], [0, 0], 3)
    with pytest.raises(InvalidInputError):
        miou(np.zeros((2, 3)))


def recount_miou(labels, preds, k):
    ious = []
    for c in range(k):
        tp = sum(1 for a, b in zip(labels, preds) if a == c and b == c)
        union = sum(1 for a, b in zip(labels, preds) if a == c or b == c)
        if union:
            ious.append(tp / union)
    return sum(ious) / len(ious)


def test_miou_matches_recount_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 300))
        labels = rng.integers(0, k, n)
        preds = np.where(rng.uniform(size=n) < 0.6, labels, rng.integers(0, k, n))
        assert abs(miou(confusion_matrix(labels, preds, k)) - recount_miou(labels.tolist(), preds.tolist(), k)) < 1e-12


# ---------------------------------------------------------------- robustness


def test_ce_and_rr_hand_arithmetic():
    inp = RobustnessInput(0.8, {"fog": [0.7, 0.6, 0.5]}, {"fog": [0.6, 0.5, 0.4]})
    ce, mce = corruption_error(inp)
    assert abs(ce["fog"] - (0.3 + 0.4 + 0.5) / (0.4 + 0.5 + 0.6)) < 1e-12
    rr, mrr = resilience_rate(inp)
    assert abs(rr["fog"] - (0.7 + 0.6 + 0.5) / (3 * 0.8)) < 1e-12
    assert mce == ce["fog"] and mrr == rr["fog"]


def test_ce_equal_to_baseline_is_one():
    inp = RobustnessInput(0.9, {"snow": [0.5, 0.4, 0.3]}, {"snow": [0.5, 0.4, 0.3]})
    assert corruption_error(inp)[0]["snow"] == 1.0


def test_robustness_errors():
    with pytest.raises(DegenerateBaselineError):
        corruption_error(RobustnessInput(0.9, {"a": [0.5] * 3}, {"a": [1.0] * 3}))
    with pytest.raises(DegenerateBaselineError):
        resilience_rate(RobustnessInput(0.0, {"a": [0.5] * 3}, {"a": [0.5] * 3}))
    with pytest.raises(InvalidInputError):
        RobustnessInput(0.9, {"a": [0.5] * 2}, {"a": [0.5] * 3})


# ---------------------------------------------------------------- detection


def test_perfect_detections():
    gts = [GroundTruth(0, (i * 10.0, 0.0)) for i in range(4)]
    preds = [Prediction(0, g.center, 0.9) for g in gts]
    det = DetectionSet(preds, gts)
    assert average_precision(det, 0, 0.5) == 1.0
    assert mean_average_precision(det) == 1.0


def test_no_predictions_and_no_ground_truth():
    det = DetectionSet([], [GroundTruth(0, (0.0, 0.0))])
    assert average_precision(det, 0, 1.0) == 0.0
    det = DetectionSet([Prediction(1, (0.0, 0.0), 0.5)], [GroundTruth(0, (0.0, 0.0))])
    assert average_precision(det, 1, 1.0) is None
    with pytest.raises(DegenerateInputError):
        mean_average_precision(DetectionSet([Prediction(0, (0, 0), 0.5)], []))
    with pytest.raises(InvalidInputError):
        DetectionSet([Prediction(0, (0, 0), math.nan)], [])


def test_threshold_is_inclusive():
    det = DetectionSet([Prediction(0, (1.0, 0.0), 0.5)], [GroundTruth(0, (0.0, 0.0))])
    assert average_precision(det, 0, 1.0) == 1.0
    assert average_precision(det, 0, 0.5) == 0.0


def oracle_ap(preds, gts, thr):
    """Greedy matching re-derived by exhaustive search over free ground truth,
    then 101-point interpolation from the raw precision/recall list."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    free = set(range(len(gts)))
    flags = []
    for i in order:
        best, best_d = None, math.inf
        for j in sorted(free):
            d = math.dist(preds[i].center, gts[j].center)
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d <= thr:
            free.discard(best)
            flags.append(1)
        else:
            flags.append(0)
    prec, rec = [], []
    tp = 0
    for r, f in enumerate(flags, 1):
        tp += f
        prec.append(tp / r)
        rec.append(tp / len(gts))
    total = 0.0
    for k in range(101):
        level = k / 100
        cands = [p for p, r in zip(prec, rec) if r >= level]
        total += max(cands) if cands else 0.0
    return total / 101


def test_ap_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n_gt, n_pred = int(rng.integers(1, 11)), int(rng.integers(0, 11))
        gts = [GroundTruth(0, tuple(rng.uniform(0, 8, 2))) for _ in range(n_gt)]
        preds = [Prediction(0, tuple(rng.uniform(0, 8, 2)), float(rng.uniform())) for _ in range(n_pred)]
        det = DetectionSet(preds, gts)
        for thr in (0.5, 1.0, 2.0, 4.0):
            assert abs(average_precision(det, 0, thr) - oracle_ap(preds, gts, thr)) < 1e-9


def test_interpolation_monotone_envelope():
    assert interpolated_ap(np.array([0.0, 1.0]), 1) == pytest.approx(0.5)
    assert interpolated_ap(np.array([1.0, 0.0, 1.0]), 2) == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)


def test_nds_closed_forms():
    assert nds(1.0, [0, 0, 0, 0, 0]) == 1.0
    assert nds(0.0, [1, 1, 1, 1, 1]) == 0.0
    assert nds(0.5, [2, 0.5, 0, 0, 0]) == pytest.approx((2.5 + 0 + 0.5 + 3) / 10)
    with pytest.raises(InvalidInputError):
        nds(0.5, [0, 0, 0, 0])
    with pytest.raises(InvalidInputError):
        nds(1.5, [0] * 5)


def test_report_serialisation():
    cm = confusion_matrix([0, 1, 1], [0, 1, 0], 3)
    rep = segmentation_report(cm)
    data = json.loads(rep.to_json())
    assert data["per_class_iou"][2] is None
    assert data["miou"] == pytest.approx(rep.miou)
    assert "map" not in data
    assert MetricReport(nds=0.5).to_dict() == {"nds": 0.5}


def test_confusion_matches_loop():
    rng = np.random.default_rng(2)
    labels, preds = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    cm = confusion_matrix(labels, preds, 4)
    ref = np.zeros((4, 4), dtype=int)
    for a, b in zip(labels, preds):
        ref[a, b] += 1
    assert np.array_equal(cm, ref)
    assert sum(itertools.chain.from_iterable(cm.tolist())) == 100
