"""Open-set detection metrics.

Matching is greedy in confidence order: each prediction takes the
highest-IoU not-yet-matched ground-truth box of its class at IoU >= 0.5.
Average precision interpolates the precision envelope at every recall step.
Unknown-object precision/recall/F1 treat the unknown class (-1) like a
single extra class; A-OSE counts unknown ground-truth objects swallowed by
known-class predictions; wilderness impact compares closed- and open-set
precision at a fixed recall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from oodkit.tensor_io import UNKNOWN_CLASS_ID, BoundingBox, GroundTruthObject


@dataclass
class ScoredBox:
    """A prediction entering evaluation: known detections keep their
    confidence as score, unknown-flagged boxes carry a ranking score."""

    box: BoundingBox
    class_id: int
    score: float


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def _rank(predictions: list[ScoredBox]) -> list[ScoredBox]:
    return sorted(predictions, key=lambda p: -p.score)


def match_ranked(
    ranked: list[ScoredBox], gt_boxes: list[BoundingBox], iou_threshold: float
) -> list[bool]:
    """True-positive flags for already-ranked single-class predictions.

    Each ground-truth box validates at most one prediction; a prediction
    takes the highest-IoU box still available.
    """
    used = [False] * len(gt_boxes)
    flags = []
    for pred in ranked:
        best_iou, best_idx = 0.0, -1
        for idx, gt_box in enumerate(gt_boxes):
            if used[idx]:
                continue
            overlap = iou(pred.box, gt_box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_idx = overlap, idx
        if best_idx >= 0:
            used[best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(
    predictions: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float | None:
    """Every-point interpolated AP for one class; None without any GT."""
    gt_boxes = [g.box for g in ground_truth if g.class_id == class_id]
    if not gt_boxes:
        return None
    ranked = _rank([p for p in predictions if p.class_id == class_id])
    if not ranked:
        return 0.0
    flags = np.array(match_ranked(ranked, gt_boxes, iou_threshold), dtype=np.float64)
    cum_tp = np.cumsum(flags)
    recall = cum_tp / len(gt_boxes)
    precision = cum_tp / np.arange(1, len(ranked) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def mean_average_precision(
    predictions: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> tuple[float | None, dict[int, float | None]]:
    """Mean AP over known classes that have ground truth."""
    per_class = {
        c: average_precision(predictions, ground_truth, c, iou_threshold)
        for c in range(num_classes)
    }
    defined = [ap for ap in per_class.values() if ap is not None]
    return (float(np.mean(defined)) if defined else None), per_class


def harmonic_f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class UnknownMetrics:
    u_ap: float | None
    u_pre: float | None
    u_rec: float | None
    u_f1: float | None
    tp: int
    fp: int
    fn: int


def unknown_metrics(
    unknown_boxes: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> UnknownMetrics:
    """Precision/recall/F1/AP of unknown-flagged boxes against unknown GT.

    Rates with an empty denominator are None (absent), except F1 of a
    (0, 0) precision/recall pair which is 0.
    """
    gt_unknown = [g for g in ground_truth if g.class_id == UNKNOWN_CLASS_ID]
    ranked = _rank(unknown_boxes)
    flags = match_ranked(ranked, [g.box for g in gt_unknown], iou_threshold)
    tp = sum(flags)
    fp = len(flags) - tp
    fn = len(gt_unknown) - tp
    u_pre = tp / (tp + fp) if (tp + fp) > 0 else None
    u_rec = tp / len(gt_unknown) if gt_unknown else None
    u_f1 = harmonic_f1(u_pre, u_rec) if (u_pre is not None and u_rec is not None) else None
    boxes_ranked = [ScoredBox(p.box, UNKNOWN_CLASS_ID, p.score) for p in unknown_boxes]
    u_ap = average_precision(boxes_ranked, gt_unknown, UNKNOWN_CLASS_ID, iou_threshold)
    return UnknownMetrics(u_ap=u_ap, u_pre=u_pre, u_rec=u_rec, u_f1=u_f1, tp=tp, fp=fp, fn=fn)


def a_ose(
    known_predictions: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    iou_threshold: float = 0.5,
    per_prediction: bool = False,
) -> int:
    """Open-set errors: unknown GT objects covered by known-class
    predictions. By default each GT object counts once no matter how many
    predictions sit on it; ``per_prediction`` counts the predictions
    instead."""
    gt_unknown = [g for g in ground_truth if g.class_id == UNKNOWN_CLASS_ID]
    if per_prediction:
        return sum(
            1
            for p in known_predictions
            if any(iou(p.box, g.box) >= iou_threshold for g in gt_unknown)
        )
    return sum(
        1
        for g in gt_unknown
        if any(iou(p.box, g.box) >= iou_threshold for p in known_predictions)
    )


def wilderness_impact(
    known_predictions: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    recall_level: float = 0.8,
    iou_threshold: float = 0.5,
) -> float | None:
    """Relative precision drop when unknown-object overlaps count as FPs.

    The cutoff is the shortest confidence-ranked prefix reaching the recall
    level against known GT; closed-set precision ignores false positives
    that sit on unknown objects, open-set precision counts them. None when
    the recall level is unreachable.
    """
    known_gt = [g for g in ground_truth if g.class_id != UNKNOWN_CLASS_ID]
    unknown_gt = [g for g in ground_truth if g.class_id == UNKNOWN_CLASS_ID]
    if not known_gt:
        return None
    ranked = _rank(known_predictions)
    used: dict[int, list[bool]] = {}
    gt_by_class: dict[int, list[BoundingBox]] = {}
    for g in known_gt:
        gt_by_class.setdefault(g.class_id, []).append(g.box)
    for c, boxes in gt_by_class.items():
        used[c] = [False] * len(boxes)

    tp = 0
    fp_closed = 0
    fp_open = 0
    for pred in ranked:
        boxes = gt_by_class.get(pred.class_id, [])
        flags = used.get(pred.class_id, [])
        best_iou, best_idx = 0.0, -1
        for idx, gt_box in enumerate(boxes):
            if flags[idx]:
                continue
            overlap = iou(pred.box, gt_box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_idx = overlap, idx
        if best_idx >= 0:
            flags[best_idx] = True
            tp += 1
        else:
            fp_open += 1
            if not any(iou(pred.box, g.box) >= iou_threshold for g in unknown_gt):
                fp_closed += 1
        if tp > 0 and tp / len(known_gt) >= recall_level:
            p_closed = tp / (tp + fp_closed)
            p_open = tp / (tp + fp_open)
            return p_closed / p_open - 1.0
    return None


def pareto_front(points: list[tuple[float, float]]) -> list[int]:
    """Indices of points not dominated under component-wise >= (with at
    least one strict), ordered by the first coordinate descending."""
    order = sorted(range(len(points)), key=lambda i: (-points[i][0], -points[i][1], i))
    kept: list[int] = []
    best_x = best_y = -np.inf
    for idx in order:
        x, y = points[idx]
        if y > best_y or (x == best_x and y == best_y):
            kept.append(idx)
            best_x, best_y = x, y
    return kept


@dataclass
class EvalReport:
    dataset: str
    conf_threshold: float
    map_known: float | None
    per_class_ap: dict[int, float | None]
    u_ap: float | None
    u_pre: float | None
    u_rec: float | None
    u_f1: float | None
    a_ose: int
    wi: float | None
    tp_unknown: int
    fp_unknown: int
    fn_unknown: int
    n_known_predictions: int = 0
    n_unknown_boxes: int = 0
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {
            "dataset": self.dataset,
            "conf_threshold": self.conf_threshold,
            "map": self.map_known,
            "per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
            "u_ap": self.u_ap,
            "u_pre": self.u_pre,
            "u_rec": self.u_rec,
            "u_f1": self.u_f1,
            "a_ose": self.a_ose,
            "wi": self.wi,
            "counts": {
                "tp_unknown": self.tp_unknown,
                "fp_unknown": self.fp_unknown,
                "fn_unknown": self.fn_unknown,
                "known_predictions": self.n_known_predictions,
                "unknown_boxes": self.n_unknown_boxes,
            },
        }
        if self.extras:
            doc["extras"] = self.extras
        return doc


def evaluate_detections(
    known_predictions: list[ScoredBox],
    unknown_boxes: list[ScoredBox],
    ground_truth: list[GroundTruthObject],
    num_classes: int,
    dataset: str = "",
    conf_threshold: float = 0.0,
    iou_threshold: float = 0.5,
    recall_level: float = 0.8,
) -> EvalReport:
    """Assemble the full report for one dataset at one operating point."""
    map_known, per_class = mean_average_precision(
        known_predictions, ground_truth, num_classes, iou_threshold
    )
    unk = unknown_metrics(unknown_boxes, ground_truth, iou_threshold)
    return EvalReport(
        dataset=dataset,
        conf_threshold=conf_threshold,
        map_known=map_known,
        per_class_ap=per_class,
        u_ap=unk.u_ap,
        u_pre=unk.u_pre,
        u_rec=unk.u_rec,
        u_f1=unk.u_f1,
        a_ose=a_ose(known_predictions, ground_truth, iou_threshold),
        wi=wilderness_impact(known_predictions, ground_truth, recall_level, iou_threshold),
        tp_unknown=unk.tp,
        fp_unknown=unk.fp,
        fn_unknown=unk.fn,
        n_known_predictions=len(known_predictions),
        n_unknown_boxes=len(unknown_boxes),
    )
