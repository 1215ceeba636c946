"""Confidence baselines computed from raw class logits.

Three scores over a detection's pre-sigmoid class outputs: max softmax,
temperature-scaled max softmax, and the log-sum-exp energy. All are
oriented so that higher means more in-distribution; the decision threshold
keeps the target true-positive rate of the correct-prediction population,
i.e. the (1 - tpr) quantile of their scores, and ties stay ID.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodkit.errors import ConfigError, DataError
from oodkit.fmap import collect_correct_predictions, id_quantile
from oodkit.tensor_io import DatasetManifest

METHODS = ("msp", "energy", "odin")


@dataclass
class LogitsConfig:
    method: str = "msp"
    temperature: float = 1000.0  # odin only
    granularity: str = "global"  # global | per_class
    target_tpr: float = 0.95
    iou_match_threshold: float = 0.5


@dataclass
class LogitsStats:
    threshold: float
    id_score_min: float
    id_score_max: float
    sample_count: int


@dataclass
class LogitsThresholdRecord:
    method: str
    temperature: float
    granularity: str
    overall: LogitsStats
    per_class: dict[int, LogitsStats]
    orientation: str = "high_is_id"

    def stats_for(self, class_id: int) -> LogitsStats:
        if self.granularity == "per_class":
            stats = self.per_class.get(class_id)
            if stats is not None:
                return stats
        return self.overall

    def to_json_dict(self) -> dict:
        def enc(s: LogitsStats) -> dict:
            return {
                "threshold": s.threshold,
                "id_score_min": s.id_score_min,
                "id_score_max": s.id_score_max,
                "sample_count": s.sample_count,
            }

        return {
            "method": self.method,
            "temperature": self.temperature,
            "granularity": self.granularity,
            "orientation": self.orientation,
            "overall": enc(self.overall),
            "per_class": {str(c): enc(s) for c, s in sorted(self.per_class.items())},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LogitsThresholdRecord":
        def dec(d: dict) -> LogitsStats:
            return LogitsStats(
                d["threshold"], d["id_score_min"], d["id_score_max"], d["sample_count"]
            )

        return cls(
            method=doc["method"],
            temperature=doc["temperature"],
            granularity=doc["granularity"],
            orientation=doc.get("orientation", "high_is_id"),
            overall=dec(doc["overall"]),
            per_class={int(c): dec(s) for c, s in doc.get("per_class", {}).items()},
        )


@dataclass
class LogitsVerdict:
    is_ood: bool
    score: float
    threshold: float
    method: str
    detection_ref: tuple[str, int] | None = None  # (image_id, detection index)


def _check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise DataError(f"logits must have >= 2 classes, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("logits contain non-finite values")
    return arr


def _max_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return 1.0 / np.exp(shifted).sum(axis=1)


def msp_score(logits) -> float | np.ndarray:
    """Maximum softmax probability."""
    arr = _check_logits(logits)
    out = _max_softmax(arr)
    return float(out[0]) if np.ndim(logits) == 1 else out


def odin_score(logits, temperature: float = 1000.0) -> float | np.ndarray:
    """Maximum softmax probability of temperature-scaled logits (no input
    perturbation)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    arr = _check_logits(logits)
    out = _max_softmax(arr / temperature)
    return float(out[0]) if np.ndim(logits) == 1 else out


def energy_score(logits) -> float | np.ndarray:
    """log-sum-exp of the logits, computed max-subtracted for stability."""
    arr = _check_logits(logits)
    m = arr.max(axis=1)
    out = m + np.log(np.exp(arr - m[:, None]).sum(axis=1))
    return float(out[0]) if np.ndim(logits) == 1 else out


def score_logits(logits, cfg: LogitsConfig) -> float | np.ndarray:
    if cfg.method == "msp":
        return msp_score(logits)
    if cfg.method == "energy":
        return energy_score(logits)
    if cfg.method == "odin":
        return odin_score(logits, cfg.temperature)
    raise ConfigError(f"unknown logits method {cfg.method!r}, expected one of {METHODS}")


def _stats(scores: np.ndarray, target_tpr: float) -> LogitsStats:
    return LogitsStats(
        threshold=id_quantile(scores, 1.0 - target_tpr),
        id_score_min=float(scores.min()),
        id_score_max=float(scores.max()),
        sample_count=len(scores),
    )


def calibrate(manifest: DatasetManifest, cfg: LogitsConfig) -> LogitsThresholdRecord:
    """Threshold record from the same correct-prediction population used to
    fit centroid banks."""
    correct = collect_correct_predictions(manifest, cfg.iou_match_threshold)
    if not correct:
        raise DataError(f"dataset {manifest.name!r} has no correct predictions")
    logits = np.stack([det.logits for _, det in correct])
    classes = np.array([det.class_id for _, det in correct])
    scores = np.asarray(score_logits(logits, cfg), dtype=np.float64)
    per_class = {}
    if cfg.granularity == "per_class":
        for c in sorted(set(classes.tolist())):
            per_class[int(c)] = _stats(scores[classes == c], cfg.target_tpr)
    elif cfg.granularity != "global":
        raise ConfigError(f"unknown granularity {cfg.granularity!r}")
    return LogitsThresholdRecord(
        method=cfg.method,
        temperature=cfg.temperature,
        granularity=cfg.granularity,
        overall=_stats(scores, cfg.target_tpr),
        per_class=per_class,
    )


def classify_logits(
    logits, class_id: int, record: LogitsThresholdRecord, temperature: float | None = None
) -> LogitsVerdict:
    """Unknown when the score falls strictly below the threshold."""
    cfg = LogitsConfig(method=record.method, temperature=temperature or record.temperature)
    score = float(score_logits(np.asarray(logits, dtype=np.float64), cfg))
    stats = record.stats_for(class_id)
    return LogitsVerdict(
        is_ood=score < stats.threshold,
        score=score,
        threshold=stats.threshold,
        method=record.method,
    )
