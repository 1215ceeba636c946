"""Combining two unknown-object verdicts on the same detection.

Hard strategies vote on the boolean verdicts: AND flags unknown only when
both methods do, OR when either does. The soft strategy maps each method's
raw score into [-1, 1] relative to its own threshold and ID score range
(positive = ID side, negative = unknown side, 0 at the threshold) and sums
the two; the pair is unknown when the sum is <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from oodkit.errors import ConfigError, DataError

STRATEGIES = ("and", "or", "score")

HIGH_IS_ID = "high_is_id"
LOW_IS_ID = "low_is_id"


class ThresholdLike(Protocol):
    threshold: float
    id_score_min: float
    id_score_max: float


@dataclass
class FusedVerdict:
    is_ood: bool
    strategy: str
    value: float | None  # fusion score sum, None for hard strategies
    a_is_ood: bool
    b_is_ood: bool


def _check_refs(verdict_a, verdict_b) -> None:
    ref_a = getattr(verdict_a, "detection_ref", None)
    ref_b = getattr(verdict_b, "detection_ref", None)
    if ref_a is not None and ref_b is not None and ref_a != ref_b:
        raise DataError(f"cannot fuse verdicts for different detections: {ref_a} vs {ref_b}")


def fuse_hard(verdict_a, verdict_b, strategy: str) -> FusedVerdict:
    """Boolean vote over two verdict objects (anything with ``is_ood``)."""
    _check_refs(verdict_a, verdict_b)
    a, b = bool(verdict_a.is_ood), bool(verdict_b.is_ood)
    if strategy == "and":
        is_ood = a and b
    elif strategy == "or":
        is_ood = a or b
    else:
        raise ConfigError(f"unknown hard fusion strategy {strategy!r}")
    return FusedVerdict(is_ood=is_ood, strategy=strategy, value=None, a_is_ood=a, b_is_ood=b)


def fusion_score(raw_score: float, stats: ThresholdLike, orientation: str) -> float:
    """Normalize a raw method score into [-1, 1] around its threshold.

    On the ID side the score is scaled by the distance from threshold to
    the best ID score seen at calibration, on the unknown side by the
    distance to the worst; both sides clip, and a collapsed span (threshold
    equal to the extremum) maps straight to +/-1.
    """
    if not np.isfinite(stats.threshold):
        raise DataError(f"non-finite threshold {stats.threshold}")
    if np.isnan(raw_score):
        raise DataError("cannot normalize a NaN score")
    if orientation == HIGH_IS_ID:
        s, tau = raw_score, stats.threshold
        best, worst = stats.id_score_max, stats.id_score_min
    elif orientation == LOW_IS_ID:
        s, tau = -raw_score, -stats.threshold
        best, worst = -stats.id_score_min, -stats.id_score_max
    else:
        raise ConfigError(f"unknown orientation {orientation!r}")
    if s == tau:
        return 0.0
    if s > tau:
        span = best - tau
        if span <= 0.0:
            return 1.0
        return min(1.0, (s - tau) / span)
    span = tau - worst
    if span <= 0.0:
        return -1.0
    return max(-1.0, -(tau - s) / span)


def fuse_score(
    a_score: float,
    a_stats: ThresholdLike,
    a_orientation: str,
    b_score: float,
    b_stats: ThresholdLike,
    b_orientation: str,
) -> FusedVerdict:
    """Sum of the two normalized scores; unknown when the sum is <= 0."""
    fa = fusion_score(a_score, a_stats, a_orientation)
    fb = fusion_score(b_score, b_stats, b_orientation)
    total = fa + fb
    return FusedVerdict(
        is_ood=total <= 0.0,
        strategy="score",
        value=total,
        a_is_ood=fa < 0.0,
        b_is_ood=fb < 0.0,
    )
