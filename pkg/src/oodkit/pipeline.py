"""Fit, evaluate and sweep drivers.

These functions sit between the HTTP handlers / CLI and the core modules:
they load manifests, build centroid banks, turn per-detection verdicts into
metric inputs, and write the report and CSV artifacts. Everything is
deterministic for a fixed config: reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from oodkit.config import MethodModel, RunConfigModel, SweepEntryModel, apply_entry
from oodkit.errors import ConfigError
from oodkit.eul import UnknownProposal, proposal_candidates, select_proposals
from oodkit.fmap import (
    CentroidBank,
    classify_detection,
    fit as fit_fmap,
    load_bank,
    save_bank,
)
from oodkit.fusion import HIGH_IS_ID, LOW_IS_ID, fuse_hard, fuse_score
from oodkit.logits_ood import (
    METHODS as LOGITS_METHODS,
    LogitsThresholdRecord,
    calibrate,
    classify_logits,
)
from oodkit.metrics import EvalReport, ScoredBox, evaluate_detections, pareto_front
from oodkit.tensor_io import (
    BoundingBox,
    DatasetManifest,
    GroundTruthObject,
    ImageRecord,
    UNKNOWN_CLASS_ID,
    load_manifest,
)

logger = logging.getLogger(__name__)

EVAL_COLUMNS = [
    "method", "distance", "cluster", "sdr", "eul", "fusion",
    "conf_threshold", "map", "u_ap", "u_pre", "u_rec", "u_f1",
    "a_ose", "wi", "dataset",
]
SWEEP_COLUMNS = [
    "entry", "method", "distance", "cluster", "sdr", "eul", "fusion",
    "conf_threshold", "map", "u_f1_sum", "a_ose", "status",
]
FRONT_COLUMNS = SWEEP_COLUMNS[:-1]

# Boxes from different images are pooled for dataset-level metrics; spacing
# each image this far apart keeps cross-image IoU at exactly zero.
_IMAGE_SPACING = 1e8


def load_manifest_checked(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return load_manifest(path)


def fit_bank(manifest: DatasetManifest, cfg: RunConfigModel) -> CentroidBank:
    """Centroid bank plus calibrated thresholds for every logits method."""
    bank = fit_fmap(manifest, cfg.fit_config())
    for kind in LOGITS_METHODS:
        record = calibrate(manifest, cfg.logits_config(kind))
        bank.logits_records[kind] = record.to_json_dict()
    return bank


def bank_summary(bank: CentroidBank) -> dict:
    return {
        "num_classes": bank.num_classes,
        "stride_count": bank.stride_count,
        "distance": bank.distance,
        "cells": {
            f"{stride}:{class_id}": {
                "samples": cell.sample_count,
                "clusters": len(cell.centroids),
                "cluster_method": cell.method_used,
                "threshold": cell.effective.threshold,
                "threshold_level": cell.threshold_level,
            }
            for (stride, class_id), cell in sorted(bank.cells.items())
        },
        "global_threshold": bank.global_stats.threshold,
        "logits_thresholds": {
            kind: doc["overall"]["threshold"]
            for kind, doc in sorted(bank.logits_records.items())
        },
    }


def cmd_fit(cfg: RunConfigModel) -> dict:
    if not cfg.fit_manifest:
        raise ConfigError("fit_manifest is required")
    manifest = load_manifest_checked(cfg.fit_manifest)
    bank = fit_bank(manifest, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank_path = Path(cfg.bank_path) if cfg.bank_path else out / "bank.json"
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, bank_path)
    summary = bank_summary(bank)
    summary["bank_path"] = str(bank_path)
    logger.info("wrote bank with %d cells to %s", len(bank.cells), bank_path)
    return summary


@dataclass
class _ImageEval:
    """Threshold-independent per-image state, reused across the sweep."""

    image_index: int
    image: ImageRecord
    is_ood: list[bool]
    unknown_rank: list[float]
    eul_candidates: list[UnknownProposal]


def _logits_records(bank: CentroidBank, kinds: list[str]) -> dict[str, LogitsThresholdRecord]:
    records = {}
    for kind in kinds:
        doc = bank.logits_records.get(kind)
        if doc is None:
            raise ConfigError(f"bank has no calibrated thresholds for {kind!r}; refit first")
        records[kind] = LogitsThresholdRecord.from_json_dict(doc)
    return records


def _decide(
    method: MethodModel,
    det,
    idx: int,
    fmap_verdicts,
    logits_verdicts,
    records,
    bank: CentroidBank,
) -> tuple[bool, float]:
    """Per-detection verdict and unknown ranking score for one method."""

    def side(kind: str):
        if kind == "fmap":
            v = fmap_verdicts[idx]
            stats, _ = bank.resolve_stats(det.stride_index, det.class_id)
            return v, v.score, stats, LOW_IS_ID
        v = logits_verdicts[kind][idx]
        return v, v.score, records[kind].stats_for(det.class_id), HIGH_IS_ID

    if method.kind == "fmap":
        verdict = fmap_verdicts[idx]
        return verdict.is_ood, -verdict.score
    if method.kind in LOGITS_METHODS:
        verdict = logits_verdicts[method.kind][idx]
        return verdict.is_ood, verdict.score
    va, a_raw, a_stats, a_orient = side(method.a)
    vb, b_raw, b_stats, b_orient = side(method.b)
    scored = fuse_score(a_raw, a_stats, a_orient, b_raw, b_stats, b_orient)
    if method.strategy == "score":
        return scored.is_ood, -scored.value
    return fuse_hard(va, vb, method.strategy).is_ood, -scored.value


def _prepare_images(
    manifest: DatasetManifest, bank: CentroidBank, cfg: RunConfigModel
) -> list[_ImageEval]:
    method = cfg.method
    bases = method.base_methods()
    records = _logits_records(bank, [k for k in bases if k != "fmap"])
    eul_cfg = cfg.eul.to_config() if cfg.eul else None
    needs_maps = "fmap" in bases or eul_cfg is not None
    prepared = []
    for image_index, image in enumerate(manifest.images):
        maps = manifest.load_maps(image) if needs_maps else None
        fmap_verdicts = None
        if "fmap" in bases:
            fmap_verdicts = [classify_detection(d, maps, bank) for d in image.detections]
        logits_verdicts = {
            kind: [classify_logits(d.logits, d.class_id, rec) for d in image.detections]
            for kind, rec in records.items()
        }
        flags, ranks = [], []
        for idx, det in enumerate(image.detections):
            flag, rank = _decide(
                method, det, idx, fmap_verdicts, logits_verdicts, records, bank
            )
            flags.append(flag)
            ranks.append(rank)
        candidates = (
            proposal_candidates(image, maps, bank, eul_cfg) if eul_cfg is not None else []
        )
        prepared.append(_ImageEval(image_index, image, flags, ranks, candidates))
    return prepared


def _shift(box: BoundingBox, dx: float) -> BoundingBox:
    return BoundingBox(box.x_min + dx, box.y_min, box.x_max + dx, box.y_max)


def _collect_at_threshold(
    prepared: list[_ImageEval], threshold: float, cfg: RunConfigModel
) -> tuple[list[ScoredBox], list[ScoredBox], list[GroundTruthObject]]:
    known, unknown, gts = [], [], []
    eul_cfg = cfg.eul.to_config() if cfg.eul else None
    for item in prepared:
        dx = item.image_index * _IMAGE_SPACING
        dets = item.image.detections
        kept = [i for i in range(len(dets)) if dets[i].confidence >= threshold]
        for i in kept:
            det = dets[i]
            box = _shift(det.box, dx)
            if item.is_ood[i]:
                unknown.append(ScoredBox(box, UNKNOWN_CLASS_ID, item.unknown_rank[i]))
            else:
                known.append(ScoredBox(box, det.class_id, det.confidence))
        if eul_cfg is not None:
            visible = [dets[i] for i in kept]
            for prop in select_proposals(item.eul_candidates, visible, eul_cfg):
                unknown.append(
                    ScoredBox(_shift(prop.box, dx), UNKNOWN_CLASS_ID, prop.pseudo_confidence)
                )
        for gt in item.image.ground_truth:
            gts.append(GroundTruthObject(_shift(gt.box, dx), gt.class_id))
    return known, unknown, gts


def _describe(cfg: RunConfigModel) -> dict[str, str]:
    feature_based = "fmap" in cfg.method.base_methods() or cfg.eul is not None
    return {
        "method": cfg.method.label,
        "distance": cfg.distance if feature_based else "",
        "cluster": cfg.cluster.method if feature_based else "",
        "sdr": ("on" if cfg.sdr else "off") if feature_based else "",
        "eul": "on" if cfg.eul else "off",
        "fusion": cfg.method.strategy or "",
    }


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])


def _evaluate_config(
    cfg: RunConfigModel,
    bank: CentroidBank,
    manifests: list[DatasetManifest],
) -> dict[float, list[EvalReport]]:
    """All reports for one configuration, keyed by confidence threshold."""
    prepared = [_prepare_images(m, bank, cfg) for m in manifests]
    out: dict[float, list[EvalReport]] = {}
    for t in cfg.confidence_thresholds:
        reports = []
        for manifest, prep in zip(manifests, prepared):
            known, unknown, gts = _collect_at_threshold(prep, t, cfg)
            reports.append(
                evaluate_detections(
                    known,
                    unknown,
                    gts,
                    manifest.num_classes,
                    dataset=manifest.name,
                    conf_threshold=t,
                    iou_threshold=cfg.iou_match_threshold,
                    recall_level=cfg.wi_recall_level,
                )
            )
        out[t] = reports
    return out


def cmd_eval(cfg: RunConfigModel) -> dict:
    if not cfg.eval_manifests:
        raise ConfigError("eval_manifests is required")
    out_dir = Path(cfg.out_dir)
    bank_path = Path(cfg.bank_path) if cfg.bank_path else out_dir / "bank.json"
    if not bank_path.exists():
        raise ConfigError(f"bank not found: {bank_path}")
    bank = load_bank(bank_path)
    manifests = [load_manifest_checked(p) for p in cfg.eval_manifests]
    out_dir.mkdir(parents=True, exist_ok=True)

    desc = _describe(cfg)
    by_threshold = _evaluate_config(cfg, bank, manifests)
    rows, report_paths = [], []
    for t in cfg.confidence_thresholds:
        reports = by_threshold[t]
        doc = {
            "conf_threshold": t,
            "config": {**desc, "seed": cfg.seed, "target_tpr": cfg.target_tpr},
            "datasets": [r.to_json_dict() for r in reports],
        }
        if len(reports) == 2:
            doc["u_f1_sum"] = (reports[0].u_f1 or 0.0) + (reports[1].u_f1 or 0.0)
        path = out_dir / f"report_{t:g}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        report_paths.append(str(path))
        for report in reports:
            rows.append(
                {
                    **desc,
                    "conf_threshold": t,
                    "map": report.map_known,
                    "u_ap": report.u_ap,
                    "u_pre": report.u_pre,
                    "u_rec": report.u_rec,
                    "u_f1": report.u_f1,
                    "a_ose": report.a_ose,
                    "wi": report.wi,
                    "dataset": report.dataset,
                }
            )
    csv_path = out_dir / "eval.csv"
    _write_csv(csv_path, EVAL_COLUMNS, rows)
    return {"csv_path": str(csv_path), "report_paths": report_paths, "rows": rows}


def _bank_cache_key(cfg: RunConfigModel) -> str:
    relevant = {
        "distance": cfg.distance,
        "cluster": cfg.cluster.model_dump(),
        "sdr": cfg.sdr.model_dump() if cfg.sdr else None,
        "roi": cfg.roi.model_dump(),
        "logits": cfg.logits.model_dump(),
        "target_tpr": cfg.target_tpr,
        "iou": cfg.iou_match_threshold,
        "min_samples": cfg.min_samples_per_cell,
        "seed": cfg.seed,
    }
    return json.dumps(relevant, sort_keys=True)


def cmd_sweep(cfg: RunConfigModel) -> dict:
    if not cfg.fit_manifest:
        raise ConfigError("fit_manifest is required")
    if not cfg.eval_manifests:
        raise ConfigError("eval_manifests is required")
    fit_manifest = load_manifest_checked(cfg.fit_manifest)
    eval_manifests = [load_manifest_checked(p) for p in cfg.eval_manifests]
    has_known = [
        any(gt.class_id != UNKNOWN_CLASS_ID for img in m.images for gt in img.ground_truth)
        for m in eval_manifests
    ]
    known_source = max(
        (i for i, flag in enumerate(has_known) if flag), default=None
    )  # mAP / A-OSE come from the last split with known ground truth

    entries = cfg.runs or [SweepEntryModel()]
    resolved = []
    for i, entry in enumerate(entries):
        rc = apply_entry(cfg, entry)
        if entry.name is None:
            rc = rc.model_copy(update={"name": f"{cfg.name}[{i}]"})
        resolved.append(rc)

    banks: dict[str, CentroidBank] = {}
    bank_lock = threading.Lock()

    def bank_for(rc: RunConfigModel) -> CentroidBank:
        key = _bank_cache_key(rc)
        with bank_lock:
            if key not in banks:
                banks[key] = fit_bank(fit_manifest, rc)
            return banks[key]

    def run_entry(rc: RunConfigModel) -> list[dict]:
        desc = {"entry": rc.name, **_describe(rc)}
        try:
            bank = bank_for(rc)
            by_threshold = _evaluate_config(rc, bank, eval_manifests)
        except Exception as exc:  # recorded per row; the sweep keeps going
            logger.warning("sweep entry %s failed: %s", rc.name, exc)
            return [
                {**desc, "conf_threshold": t, "status": f"error: {exc}"}
                for t in rc.confidence_thresholds
            ]
        rows = []
        for t in rc.confidence_thresholds:
            reports = by_threshold[t]
            row = {**desc, "conf_threshold": t, "status": "ok"}
            row["u_f1_sum"] = sum(r.u_f1 or 0.0 for r in reports)
            if known_source is not None:
                row["map"] = reports[known_source].map_known
                row["a_ose"] = reports[known_source].a_ose
            rows.append(row)
        return rows

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_entry = list(pool.map(run_entry, resolved))
    else:
        per_entry = [run_entry(rc) for rc in resolved]

    rows = [row for entry_rows in per_entry for row in entry_rows]
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / "sweep.csv"
    _write_csv(sweep_path, SWEEP_COLUMNS, rows)

    eligible = [
        i
        for i, row in enumerate(rows)
        if row.get("status") == "ok"
        and row.get("map") is not None
        and row.get("u_f1_sum") is not None
    ]
    points = [(rows[i]["map"], rows[i]["u_f1_sum"]) for i in eligible]
    front_rows = [rows[eligible[j]] for j in pareto_front(points)]
    front_path = out_dir / "front.csv"
    _write_csv(front_path, FRONT_COLUMNS, front_rows)

    failed = sum(1 for row in rows if row.get("status") != "ok")
    return {
        "sweep_csv": str(sweep_path),
        "front_csv": str(front_path),
        "n_rows": len(rows),
        "n_front": len(front_rows),
        "n_failed_rows": failed,
        "all_failed": bool(rows) and failed == len(rows),
    }
