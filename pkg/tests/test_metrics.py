"""Open-set evaluation metrics, checked against hand-worked and brute-force oracles."""

import numpy as np
import pytest

from oodkit.metrics import (
    ScoredBox,
    a_ose,
    average_precision,
    evaluate_detections,
    harmonic_f1,
    iou,
    match_ranked,
    mean_average_precision,
    pareto_front,
    unknown_metrics,
    wilderness_impact,
)
from oodkit.tensor_io import BoundingBox, GroundTruthObject


def _box(x0, y0, x1, y1):
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def _unit(x0, y0=0.0):
    return _box(x0, y0, x0 + 1.0, y0 + 1.0)


# --- IoU ----------------------------------------------------------------------


def test_iou_identical_boxes():
    assert iou(_box(2, 3, 10, 12), _box(2, 3, 10, 12)) == 1.0


def test_iou_disjoint_and_touching():
    assert iou(_unit(0), _unit(5)) == 0.0
    assert iou(_unit(0), _unit(1)) == 0.0  # shared edge has zero area


def test_iou_half_overlapping_unit_squares():
    # overlap 0.5, union 1.5
    assert iou(_unit(0), _box(0.5, 0, 1.5, 1)) == pytest.approx(1.0 / 3.0)


def test_iou_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = np.sort(rng.uniform(0, 10, 4))
        b = np.sort(rng.uniform(0, 10, 4))
        ba = _box(a[0], a[2], a[1], a[3])
        bb = _box(b[0], b[2], b[1], b[3])
        assert iou(ba, bb) == pytest.approx(iou(bb, ba), abs=1e-12)
        assert 0.0 <= iou(ba, bb) <= 1.0


# --- greedy matching ------------------------------------------------------------


def _oracle_match(ranked, gt_boxes, thr):
    """Clean-room restatement: walk in rank order, take the best-overlap
    ground-truth box still available."""
    available = set(range(len(gt_boxes)))
    flags = []
    for pred in ranked:
        scored = [(iou(pred.box, gt_boxes[i]), i) for i in sorted(available)]
        scored = [(o, i) for o, i in scored if o >= thr and o > 0.0]
        if scored:
            best = max(scored, key=lambda t: t[0])
            available.discard(best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags


def test_match_prefers_highest_iou_not_first_listed():
    gt = [_box(0, 0, 10, 6), _box(0, 0, 10, 10)]  # second overlaps more
    pred = [ScoredBox(_box(0, 0, 10, 9), 0, 0.9), ScoredBox(_box(0, 0, 10, 6), 0, 0.8)]
    assert match_ranked(pred, gt, 0.5) == [True, True]


def test_match_each_gt_validates_once():
    gt = [_box(0, 0, 10, 10)]
    pred = [ScoredBox(_box(0, 0, 10, 10), 0, 0.9), ScoredBox(_box(0, 0, 10, 10), 0, 0.8)]
    assert match_ranked(pred, gt, 0.5) == [True, False]


def test_match_against_oracle_on_random_scenes():
    rng = np.random.default_rng(1)
    for _ in range(200):
        gt_boxes = []
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.uniform(0, 30, 2)
            w, h = rng.uniform(2, 10, 2)
            gt_boxes.append(_box(x, y, x + w, y + h))
        ranked = []
        scores = -np.sort(-rng.uniform(size=int(rng.integers(0, 8))))
        for s in scores:
            x, y = rng.uniform(0, 30, 2)
            w, h = rng.uniform(2, 10, 2)
            ranked.append(ScoredBox(_box(x, y, x + w, y + h), 0, float(s)))
        assert match_ranked(ranked, gt_boxes, 0.5) == _oracle_match(ranked, gt_boxes, 0.5)


# --- average precision ------------------------------------------------------------


def test_ap_classic_five_sixths():
    """Two objects, three ranked predictions (hit, miss, hit):
    envelope is 1 up to recall 0.5 then 2/3, so AP = 5/6."""
    gt = [GroundTruthObject(_unit(0), 0), GroundTruthObject(_unit(10), 0)]
    preds = [
        ScoredBox(_unit(0), 0, 0.9),
        ScoredBox(_unit(50), 0, 0.8),
        ScoredBox(_unit(10), 0, 0.7),
    ]
    assert average_precision(preds, gt, 0) == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_ap_perfect_and_zero():
    gt = [GroundTruthObject(_unit(0), 0)]
    assert average_precision([ScoredBox(_unit(0), 0, 0.9)], gt, 0) == 1.0
    assert average_precision([ScoredBox(_unit(9), 0, 0.9)], gt, 0) == 0.0
    assert average_precision([], gt, 0) == 0.0


def test_ap_none_without_ground_truth():
    assert average_precision([ScoredBox(_unit(0), 0, 0.9)], [], 0) is None


def test_ap_invariant_under_monotone_score_transform():
    rng = np.random.default_rng(2)
    gt = [GroundTruthObject(_unit(3 * i), 0) for i in range(5)]
    preds = [
        ScoredBox(_unit(3 * int(rng.integers(0, 7))), 0, float(s))
        for s in rng.permutation(10) + 1
    ]
    base = average_precision(preds, gt, 0)
    warped = [ScoredBox(p.box, 0, np.log(p.score) * 3 + 7) for p in preds]
    assert average_precision(warped, gt, 0) == pytest.approx(base, abs=1e-12)


def test_ap_never_increases_when_appending_low_rank_misses():
    rng = np.random.default_rng(3)
    for _ in range(30):
        gt = [GroundTruthObject(_unit(3 * i), 0) for i in range(4)]
        preds = [
            ScoredBox(_unit(3 * int(rng.integers(0, 6))), 0, float(s))
            for s in rng.uniform(0.5, 1.0, size=6)
        ]
        base = average_precision(preds, gt, 0)
        extended = preds + [ScoredBox(_unit(100), 0, 0.1)]
        assert average_precision(extended, gt, 0) <= base + 1e-12


def test_map_averages_defined_classes_only():
    gt = [GroundTruthObject(_unit(0), 0)]  # class 1 has no ground truth
    preds = [ScoredBox(_unit(0), 0, 0.9), ScoredBox(_unit(5), 1, 0.9)]
    mean_ap, per_class = mean_average_precision(preds, gt, num_classes=2)
    assert mean_ap == 1.0
    assert per_class == {0: 1.0, 1: None}
    assert mean_average_precision([], [], 2) == (None, {0: None, 1: None})


# --- unknown-object metrics ----------------------------------------------------


def test_unknown_metrics_worked_example():
    """Two unknown objects, three flagged boxes, one hit: precision 1/3,
    recall 1/2, F1 0.4."""
    gt = [GroundTruthObject(_unit(0), -1), GroundTruthObject(_unit(10), -1)]
    boxes = [ScoredBox(_unit(0), -1, 0.9), ScoredBox(_unit(40), -1, 0.8), ScoredBox(_unit(60), -1, 0.7)]
    m = unknown_metrics(boxes, gt)
    assert (m.tp, m.fp, m.fn) == (1, 2, 1)
    assert m.u_pre == pytest.approx(1.0 / 3.0)
    assert m.u_rec == pytest.approx(0.5)
    assert m.u_f1 == pytest.approx(0.4)


def test_unknown_metrics_empty_denominators_are_absent():
    gt_known_only = [GroundTruthObject(_unit(0), 2)]
    m = unknown_metrics([ScoredBox(_unit(5), -1, 0.9)], gt_known_only)
    assert m.u_rec is None and m.u_f1 is None and m.u_ap is None
    assert m.u_pre == 0.0

    m2 = unknown_metrics([], [GroundTruthObject(_unit(0), -1)])
    assert m2.u_pre is None and m2.u_f1 is None
    assert m2.u_rec == 0.0


def test_unknown_f1_zero_when_both_rates_zero():
    gt = [GroundTruthObject(_unit(0), -1)]
    m = unknown_metrics([ScoredBox(_unit(50), -1, 0.9)], gt)
    assert m.u_pre == 0.0 and m.u_rec == 0.0 and m.u_f1 == 0.0


def test_harmonic_f1_identity():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        p, r = rng.uniform(1e-6, 1.0, 2)
        assert harmonic_f1(p, r) == pytest.approx(2 * p * r / (p + r), abs=1e-12)
    assert harmonic_f1(0.0, 0.0) == 0.0


# --- open-set errors -------------------------------------------------------------


def test_a_ose_counts_each_swallowed_object_once():
    gt = [GroundTruthObject(_unit(0), -1), GroundTruthObject(_unit(10), -1)]
    preds = [ScoredBox(_unit(0), 2, 0.9), ScoredBox(_unit(0), 3, 0.8)]
    assert a_ose(preds, gt) == 1
    assert a_ose(preds, gt, per_prediction=True) == 2


def test_a_ose_ignores_predictions_off_unknowns():
    gt = [GroundTruthObject(_unit(0), -1), GroundTruthObject(_unit(10), 1)]
    preds = [ScoredBox(_unit(10), 1, 0.9), ScoredBox(_unit(30), 2, 0.8)]
    assert a_ose(preds, gt) == 0


def test_a_ose_weakly_decreases_as_predictions_become_unknown():
    rng = np.random.default_rng(5)
    gt = [GroundTruthObject(_unit(4 * i), -1) for i in range(5)]
    preds = [
        ScoredBox(_unit(4 * int(rng.integers(0, 8))), 0, float(rng.uniform()))
        for _ in range(10)
    ]
    values = []
    for keep in range(len(preds), -1, -1):
        values.append(a_ose(preds[:keep], gt))
    assert all(b <= a for a, b in zip(values, values[1:]))


# --- wilderness impact --------------------------------------------------------------


def _wi_scene():
    """Six known objects; rank order is four hits, one unknown-overlap miss,
    then the fifth hit that reaches recall 5/6 >= 0.8."""
    gt = [GroundTruthObject(_unit(3 * i), 0) for i in range(6)]
    gt.append(GroundTruthObject(_unit(50), -1))
    preds = [ScoredBox(_unit(3 * i), 0, 0.9 - 0.1 * i) for i in range(4)]
    preds.append(ScoredBox(_unit(50), 0, 0.45))
    preds.append(ScoredBox(_unit(12), 0, 0.4))
    return preds, gt


def test_wilderness_impact_worked_example():
    preds, gt = _wi_scene()
    # closed precision 5/5, open precision 5/6 at the cutoff
    assert wilderness_impact(preds, gt, recall_level=0.8) == pytest.approx(0.2, abs=1e-12)


def test_wilderness_impact_zero_without_unknown_overlap():
    preds, gt = _wi_scene()
    gt = [g for g in gt if g.class_id != -1]
    assert wilderness_impact(preds, gt, recall_level=0.8) == pytest.approx(0.0, abs=1e-12)


def test_wilderness_impact_none_when_recall_unreachable():
    gt = [GroundTruthObject(_unit(3 * i), 0) for i in range(6)]
    preds = [ScoredBox(_unit(0), 0, 0.9)]
    assert wilderness_impact(preds, gt, recall_level=0.8) is None
    assert wilderness_impact(preds, [], recall_level=0.8) is None


# --- pareto front ----------------------------------------------------------------


def _oracle_front(points):
    kept = []
    for i, (x, y) in enumerate(points):
        dominated = any(
            (xj >= x and yj >= y) and (xj > x or yj > y)
            for j, (xj, yj) in enumerate(points)
            if j != i
        )
        if not dominated:
            kept.append(i)
    return kept


def test_front_drops_dominated_point():
    points = [(1.0, 1.0), (2.0, 2.0)]
    assert pareto_front(points) == [1]


def test_front_keeps_mutually_nondominating_triple():
    points = [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]
    assert sorted(pareto_front(points)) == [0, 1, 2]


def test_front_keeps_exact_duplicates_of_front_points():
    points = [(2.0, 2.0), (2.0, 2.0), (1.0, 1.0)]
    assert sorted(pareto_front(points)) == [0, 1]


def test_front_drops_tied_x_lower_y():
    points = [(2.0, 2.0), (2.0, 1.0)]
    assert pareto_front(points) == [0]


def test_front_matches_quadratic_oracle_on_integer_grids():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 25))
        points = [tuple(map(float, rng.integers(0, 5, 2))) for _ in range(n)]
        assert sorted(pareto_front(points)) == sorted(_oracle_front(points))


def test_front_ordered_by_first_coordinate_descending():
    rng = np.random.default_rng(7)
    points = [tuple(map(float, rng.uniform(0, 1, 2))) for _ in range(30)]
    kept = pareto_front(points)
    xs = [points[i][0] for i in kept]
    assert xs == sorted(xs, reverse=True)


# --- assembled report -------------------------------------------------------------


def test_evaluate_detections_composes_all_metrics():
    preds, gt = _wi_scene()
    unknown_boxes = [ScoredBox(_unit(50), -1, 0.8)]
    report = evaluate_detections(preds, unknown_boxes, gt, num_classes=2, dataset="toy")
    assert report.wi == pytest.approx(0.2)
    assert report.u_rec == 1.0 and report.u_pre == 1.0 and report.u_f1 == 1.0
    assert report.a_ose == 1  # the known-class prediction sitting on the unknown
    assert report.map_known == pytest.approx(average_precision(preds, gt, 0))
    assert report.n_known_predictions == 6 and report.n_unknown_boxes == 1
    doc = report.to_json_dict()
    assert doc["counts"]["tp_unknown"] == 1
    assert doc["dataset"] == "toy"
