"""Centroid banks over detector feature maps.

Fitting collects every correct prediction (same class as a ground-truth box
it overlaps enough, each GT validating at most one detection), pools its
feature vector from the stride it originated at, optionally reduces it, and
clusters each (stride, class) cell. A detection is scored by its minimum
distance to the cell's centroids and called unknown when the score exceeds
the cell's threshold, the quantile of the fit population's own scores at
the target true-positive rate. Cells with few samples inherit the class
pool's quantile, tiny classes the global one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from oodkit.clustering import ClusterSpec, ClusterResult, fit_clusters, pairwise_distances
from oodkit.errors import AllNoiseError, FitError, InsufficientSamplesError
from oodkit.metrics import iou
from oodkit.roi_align import RoiAlignConfig, extract_detection_features
from oodkit.sdr import Reducer, SdrConfig, train_reducer
from oodkit.tensor_io import DatasetManifest, Detection, ImageRecord, StrideMap

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    distance: str = "l2"
    target_tpr: float = 0.95
    iou_match_threshold: float = 0.5
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    roi: RoiAlignConfig = field(default_factory=RoiAlignConfig)
    min_samples_per_cell: int = 20
    sdr: SdrConfig | None = None


@dataclass
class ThresholdStats:
    threshold: float
    id_score_min: float
    id_score_max: float
    sample_count: int


@dataclass
class CellRecord:
    stride_index: int
    class_id: int
    centroids: np.ndarray
    method_used: str
    sample_count: int
    own: ThresholdStats  # quantile of this cell's own fit scores
    effective: ThresholdStats  # after the cell -> class -> global fallback
    threshold_level: str  # cell | class | global


@dataclass
class OodVerdict:
    is_ood: bool
    score: float
    threshold: float
    threshold_level: str
    stride_index: int
    class_id: int
    detection_ref: tuple[str, int] | None = None  # (image_id, detection index)


@dataclass
class CentroidBank:
    num_classes: int
    stride_count: int
    distance: str
    target_tpr: float
    min_samples_per_cell: int
    roi: RoiAlignConfig
    cells: dict[tuple[int, int], CellRecord]
    class_stats: dict[int, ThresholdStats]
    global_stats: ThresholdStats
    reducers: dict[int, Reducer] = field(default_factory=dict)
    logits_records: dict[str, dict] = field(default_factory=dict)

    def resolve_stats(self, stride_index: int, class_id: int) -> tuple[ThresholdStats, str]:
        """Threshold stats for a (stride, class) query, walking the fallback
        chain when the cell was never fitted."""
        cell = self.cells.get((stride_index, class_id))
        if cell is not None:
            return cell.effective, cell.threshold_level
        cls = self.class_stats.get(class_id)
        if cls is not None:
            return cls, "class"
        return self.global_stats, "global"


def id_quantile(scores: np.ndarray, target_tpr: float) -> float:
    """Score threshold keeping ~target_tpr of the ID population (linear
    interpolation between order statistics)."""
    return float(np.quantile(np.asarray(scores, dtype=np.float64), target_tpr))


def collect_correct_predictions(
    manifest: DatasetManifest, iou_threshold: float = 0.5
) -> list[tuple[ImageRecord, Detection]]:
    """Detections matching a same-class GT box at IoU >= threshold.

    Detections are taken in confidence order (no confidence floor here) and
    each GT box validates at most one of them; unknown-class GT never
    matches anything.
    """
    correct = []
    for image in manifest.images:
        order = sorted(
            range(len(image.detections)),
            key=lambda i: -image.detections[i].confidence,
        )
        used = [False] * len(image.ground_truth)
        for det_idx in order:
            det = image.detections[det_idx]
            best_iou, best_gt = 0.0, -1
            for gt_idx, gt in enumerate(image.ground_truth):
                if used[gt_idx] or gt.class_id != det.class_id:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best_iou, best_gt = overlap, gt_idx
            if best_gt >= 0:
                used[best_gt] = True
                correct.append((image, det))
    return correct


def score_features(features: np.ndarray, centroids: np.ndarray, distance: str) -> np.ndarray:
    """Minimum distance of each feature vector to any centroid."""
    return pairwise_distances(features, centroids, distance).min(axis=1)


def _apply_reducer(bank_reducers: dict[int, Reducer], stride: int, feature: np.ndarray) -> np.ndarray:
    reducer = bank_reducers.get(stride)
    return reducer.transform(feature) if reducer is not None else feature


def fit(manifest: DatasetManifest, cfg: FitConfig) -> CentroidBank:
    """Build a centroid bank from a manifest's correct predictions."""
    correct = collect_correct_predictions(manifest, cfg.iou_match_threshold)
    if not correct:
        raise FitError(f"dataset {manifest.name!r} has no correct predictions to fit on")

    by_image: dict[str, list[Detection]] = {}
    images: dict[str, ImageRecord] = {}
    for image, det in correct:
        by_image.setdefault(image.image_id, []).append(det)
        images[image.image_id] = image

    by_stride: dict[int, list[np.ndarray]] = {}
    stride_labels: dict[int, list[int]] = {}
    cell_index: dict[tuple[int, int], list[int]] = {}
    flat_feats: list[np.ndarray] = []
    flat_cells: list[tuple[int, int]] = []
    for image_id, dets in by_image.items():
        maps = manifest.load_maps(images[image_id])
        feats = extract_detection_features(maps, dets, cfg.roi)
        for det, feat in zip(dets, feats):
            key = (det.stride_index, det.class_id)
            cell_index.setdefault(key, []).append(len(flat_feats))
            by_stride.setdefault(det.stride_index, []).append(feat)
            stride_labels.setdefault(det.stride_index, []).append(det.class_id)
            flat_feats.append(feat)
            flat_cells.append(key)

    reducers: dict[int, Reducer] = {}
    if cfg.sdr is not None:
        for stride in sorted(by_stride):
            stride_cfg = replace(cfg.sdr, seed=cfg.sdr.seed + stride)
            reducer = train_reducer(
                np.stack(by_stride[stride]), np.array(stride_labels[stride]), stride_cfg
            )
            reducers[stride] = reducer
            logger.info("trained stride-%d reducer on %d features", stride, len(by_stride[stride]))
        flat_feats = [
            reducers[stride].transform(feat)
            for (stride, _), feat in zip(flat_cells, flat_feats)
        ]

    one_spec = replace(cfg.cluster, method="one")
    cells: dict[tuple[int, int], CellRecord] = {}
    cell_scores: dict[tuple[int, int], np.ndarray] = {}
    for key in sorted(cell_index):
        X = np.stack([flat_feats[i] for i in cell_index[key]])
        try:
            result: ClusterResult = fit_clusters(X, cfg.cluster, cfg.distance)
        except (InsufficientSamplesError, AllNoiseError) as exc:
            logger.info("cell %s: %s; falling back to single-mean", key, exc)
            result = fit_clusters(X, one_spec, cfg.distance)
        scores = score_features(X, result.centroids, cfg.distance)
        own = ThresholdStats(
            threshold=id_quantile(scores, cfg.target_tpr),
            id_score_min=float(scores.min()),
            id_score_max=float(scores.max()),
            sample_count=len(scores),
        )
        cells[key] = CellRecord(
            stride_index=key[0],
            class_id=key[1],
            centroids=result.centroids,
            method_used=result.method_used,
            sample_count=len(scores),
            own=own,
            effective=own,  # provisional; fallback pass below
            threshold_level="cell",
        )
        cell_scores[key] = scores

    all_scores = np.concatenate([cell_scores[k] for k in sorted(cell_scores)])
    global_stats = ThresholdStats(
        threshold=id_quantile(all_scores, cfg.target_tpr),
        id_score_min=float(all_scores.min()),
        id_score_max=float(all_scores.max()),
        sample_count=len(all_scores),
    )
    class_stats: dict[int, ThresholdStats] = {}
    for class_id in sorted({c for _, c in cells}):
        pooled = np.concatenate(
            [cell_scores[k] for k in sorted(cell_scores) if k[1] == class_id]
        )
        class_stats[class_id] = ThresholdStats(
            threshold=id_quantile(pooled, cfg.target_tpr),
            id_score_min=float(pooled.min()),
            id_score_max=float(pooled.max()),
            sample_count=len(pooled),
        )

    for key, cell in cells.items():
        if cell.sample_count >= cfg.min_samples_per_cell:
            continue
        cls = class_stats[key[1]]
        if cls.sample_count >= cfg.min_samples_per_cell:
            cell.effective, cell.threshold_level = cls, "class"
        else:
            cell.effective, cell.threshold_level = global_stats, "global"
        logger.info(
            "cell %s has %d samples (< %d); using %s threshold",
            key, cell.sample_count, cfg.min_samples_per_cell, cell.threshold_level,
        )

    return CentroidBank(
        num_classes=manifest.num_classes,
        stride_count=manifest.stride_count,
        distance=cfg.distance,
        target_tpr=cfg.target_tpr,
        min_samples_per_cell=cfg.min_samples_per_cell,
        roi=cfg.roi,
        cells=cells,
        class_stats=class_stats,
        global_stats=global_stats,
        reducers=reducers,
    )


def classify_detection(
    det: Detection, maps: dict[int, StrideMap], bank: CentroidBank
) -> OodVerdict:
    """Score one detection against its (stride, class) cell; ties stay ID.

    A query for a cell that never existed at fit time cannot attest any
    ID-closeness, so it scores infinity and is unknown by construction.
    """
    feature = extract_detection_features(maps, [det], bank.roi)[0]
    feature = _apply_reducer(bank.reducers, det.stride_index, feature)
    cell = bank.cells.get((det.stride_index, det.class_id))
    stats, level = bank.resolve_stats(det.stride_index, det.class_id)
    if cell is None:
        return OodVerdict(
            is_ood=True,
            score=float("inf"),
            threshold=stats.threshold,
            threshold_level=level,
            stride_index=det.stride_index,
            class_id=det.class_id,
        )
    score = float(score_features(feature[None, :], cell.centroids, bank.distance)[0])
    return OodVerdict(
        is_ood=score > stats.threshold,
        score=score,
        threshold=stats.threshold,
        threshold_level=level,
        stride_index=det.stride_index,
        class_id=det.class_id,
    )


def _stats_to_json(stats: ThresholdStats) -> dict:
    return {
        "threshold": stats.threshold,
        "id_score_min": stats.id_score_min,
        "id_score_max": stats.id_score_max,
        "sample_count": stats.sample_count,
    }


def _stats_from_json(doc: dict) -> ThresholdStats:
    return ThresholdStats(
        doc["threshold"], doc["id_score_min"], doc["id_score_max"], doc["sample_count"]
    )


def bank_to_json_dict(bank: CentroidBank) -> dict:
    return {
        "num_classes": bank.num_classes,
        "stride_count": bank.stride_count,
        "distance": bank.distance,
        "target_tpr": bank.target_tpr,
        "min_samples_per_cell": bank.min_samples_per_cell,
        "roi": {
            "output_size": list(bank.roi.output_size),
            "sampling_ratio": bank.roi.sampling_ratio,
            "aligned": bank.roi.aligned,
        },
        "cells": [
            {
                "stride_index": cell.stride_index,
                "class_id": cell.class_id,
                "centroids": cell.centroids.tolist(),
                "method_used": cell.method_used,
                "sample_count": cell.sample_count,
                "own": _stats_to_json(cell.own),
                "effective": _stats_to_json(cell.effective),
                "threshold_level": cell.threshold_level,
            }
            for _, cell in sorted(bank.cells.items())
        ],
        "class_stats": {
            str(c): _stats_to_json(s) for c, s in sorted(bank.class_stats.items())
        },
        "global_stats": _stats_to_json(bank.global_stats),
        "reducers": {
            str(stride): reducer.to_json_dict()
            for stride, reducer in sorted(bank.reducers.items())
        },
        "logits_records": bank.logits_records,
    }


def bank_from_json_dict(doc: dict) -> CentroidBank:
    cells = {}
    for entry in doc["cells"]:
        key = (entry["stride_index"], entry["class_id"])
        cells[key] = CellRecord(
            stride_index=entry["stride_index"],
            class_id=entry["class_id"],
            centroids=np.asarray(entry["centroids"], dtype=np.float64),
            method_used=entry["method_used"],
            sample_count=entry["sample_count"],
            own=_stats_from_json(entry["own"]),
            effective=_stats_from_json(entry["effective"]),
            threshold_level=entry["threshold_level"],
        )
    roi = RoiAlignConfig(
        output_size=tuple(doc["roi"]["output_size"]),
        sampling_ratio=doc["roi"]["sampling_ratio"],
        aligned=doc["roi"]["aligned"],
    )
    return CentroidBank(
        num_classes=doc["num_classes"],
        stride_count=doc["stride_count"],
        distance=doc["distance"],
        target_tpr=doc["target_tpr"],
        min_samples_per_cell=doc["min_samples_per_cell"],
        roi=roi,
        cells=cells,
        class_stats={int(c): _stats_from_json(s) for c, s in doc["class_stats"].items()},
        global_stats=_stats_from_json(doc["global_stats"]),
        reducers={
            int(stride): Reducer.from_json_dict(entry)
            for stride, entry in doc.get("reducers", {}).items()
        },
        logits_records=dict(doc.get("logits_records", {})),
    )


def save_bank(bank: CentroidBank, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bank_to_json_dict(bank), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bank(path: str | Path) -> CentroidBank:
    with open(path, "r", encoding="utf-8") as fh:
        return bank_from_json_dict(json.load(fh))
