"""Unknown-object proposals mined from the highest-resolution feature map.

Pipeline per image: a per-pixel saliency map (mean absolute deviation
across channels), recursive Otsu thresholds over its values, connected
regions of each binarization turned into image-space boxes, and a ranking
by class-distance entropy: a region whose pooled feature is distinctly
close to a few known classes (low entropy) looks more object-like than one
equidistant from all of them. Proposals overlapping an existing detection
are suppressed, the ``top_k`` lowest-entropy survivors are returned with
pseudo-confidence 1 - H.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from oodkit.errors import ConfigError, DataError, DegenerateBoxError, DegenerateMapError
from oodkit.fmap import CentroidBank, score_features
from oodkit.roi_align import roi_align
from oodkit.tensor_io import BoundingBox, Detection, ImageRecord, StrideMap
from oodkit.metrics import iou


@dataclass
class EulConfig:
    depth: int = 2
    connectivity: int = 8  # 4 | 8
    min_region_pixels: int = 4
    suppress_iou: float = 0.5
    top_k: int = 5


@dataclass
class UnknownProposal:
    box: BoundingBox
    entropy: float
    pseudo_confidence: float  # 1 - entropy
    source_threshold_level: int  # which recursive threshold produced the region


def saliency_map(data: np.ndarray) -> np.ndarray:
    """Per-pixel mean absolute deviation across channels of a (C, H, W) map."""
    if data.ndim != 3:
        raise DataError(f"expected (C, H, W), got shape {data.shape}")
    if data.shape[0] == 1:
        warnings.warn("single-channel map has zero saliency everywhere", RuntimeWarning)
        return np.zeros(data.shape[1:], dtype=np.float64)
    mean = data.mean(axis=0)
    return np.abs(data - mean).mean(axis=0).astype(np.float64)


def otsu_threshold(values: np.ndarray) -> float:
    """Histogram Otsu threshold (256 bins over the value range).

    Maximizes the between-class variance w0*w1*(mu0-mu1)^2 over all bin
    edges; ties pick the lower edge. Returns the winning bin edge.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) == 0 or values.min() == values.max():
        raise DegenerateMapError("cannot threshold a constant value set")
    counts, edges = np.histogram(values, bins=256, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2.0
    cum_n = np.cumsum(counts)
    cum_s = np.cumsum(counts * centers)
    n0 = cum_n[:-1].astype(np.float64)  # mass below edge t for t = 1..255
    n1 = cum_n[-1] - n0
    s0 = cum_s[:-1]
    s1 = cum_s[-1] - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(n0 > 0, s0 / n0, 0.0)
        mu1 = np.where(n1 > 0, s1 / n1, 0.0)
    sigma = n0 * n1 * (mu0 - mu1) ** 2
    sigma[(n0 == 0) | (n1 == 0)] = -1.0
    best = int(np.argmax(sigma))  # first maximum = lowest edge on ties
    return float(edges[best + 1])


def recursive_otsu(values: np.ndarray, depth: int = 2) -> list[float]:
    """Ascending thresholds, each computed on the tail above the previous.

    Recursion stops early when the tail drops below 16 values or becomes
    degenerate; a degenerate full map yields an empty list.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    thresholds: list[float] = []
    current = np.asarray(values, dtype=np.float64).ravel()
    for _ in range(depth):
        try:
            t = otsu_threshold(current)
        except DegenerateMapError:
            break
        thresholds.append(t)
        current = current[current > t]
        if len(current) < 16:
            break
    return thresholds


_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


def regions_to_boxes(
    binary: np.ndarray,
    connectivity: int = 8,
    min_region_pixels: int = 1,
    downsample_factor: int = 1,
) -> list[BoundingBox]:
    """Connected components of a binary map as image-space boxes.

    The box spans [min_col, min_row, max_col + 1, max_row + 1] in feature
    pixels, scaled by the downsample factor. Output is sorted by position
    so it does not depend on labelling order.
    """
    if connectivity not in _STRUCTURES:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    boxes = []
    if count:
        sizes = np.bincount(labels.ravel())
        for label, slices in enumerate(ndimage.find_objects(labels), start=1):
            if slices is None or sizes[label] < min_region_pixels:
                continue
            rows, cols = slices
            boxes.append(
                BoundingBox(
                    x_min=cols.start * downsample_factor,
                    y_min=rows.start * downsample_factor,
                    x_max=cols.stop * downsample_factor,
                    y_max=rows.stop * downsample_factor,
                )
            )
    boxes.sort(key=lambda b: (b.y_min, b.x_min, b.y_max, b.x_max))
    return boxes


def class_distance_entropy(distances: np.ndarray) -> float:
    """Entropy of the normalized class-distance profile, log base = number
    of classes; 0 * log 0 counts as 0. All-zero distances are uninformative
    and score 1 with a warning."""
    d = np.asarray(distances, dtype=np.float64)
    if len(d) < 2:
        raise DataError(f"entropy needs >= 2 class distances, got {len(d)}")
    total = d.sum()
    if total == 0.0:
        warnings.warn("all class distances are zero; entropy forced to 1", RuntimeWarning)
        return 1.0
    p = d / total
    nonzero = p > 0.0
    return float(-(p[nonzero] * (np.log(p[nonzero]) / np.log(len(d)))).sum())


def _proposal_feature(
    box: BoundingBox, stride_one: StrideMap, bank: CentroidBank
) -> np.ndarray:
    pooled = roi_align(stride_one.data, box, 1.0 / stride_one.downsample_factor, bank.roi)
    feature = pooled.reshape(-1)
    reducer = bank.reducers.get(stride_one.stride_index)
    return reducer.transform(feature) if reducer is not None else feature


def rank_proposals(
    boxes: list[tuple[BoundingBox, int]],
    maps: dict[int, StrideMap],
    bank: CentroidBank,
) -> list[UnknownProposal]:
    """Entropy-rank candidate boxes against the stride-1 centroid cells.

    ``boxes`` pairs each box with the threshold level that produced it.
    Ordering is ascending entropy with insertion order breaking ties, so a
    larger top_k always extends the smaller one's prefix.
    """
    stride_one = maps.get(1)
    if stride_one is None:
        raise DataError("no stride-1 feature map available")
    cells = [
        bank.cells[(1, c)] for c in range(bank.num_classes) if (1, c) in bank.cells
    ]
    proposals = []
    for box, level in boxes:
        if len(cells) < 2:
            warnings.warn(
                "fewer than two classes have stride-1 centroids; entropy forced to 1",
                RuntimeWarning,
            )
            entropy = 1.0
        else:
            try:
                feature = _proposal_feature(box, stride_one, bank)
            except DegenerateBoxError:
                continue
            distances = np.array(
                [
                    score_features(feature[None, :], cell.centroids, bank.distance)[0]
                    for cell in cells
                ]
            )
            entropy = class_distance_entropy(distances)
        proposals.append(
            UnknownProposal(
                box=box,
                entropy=entropy,
                pseudo_confidence=1.0 - entropy,
                source_threshold_level=level,
            )
        )
    proposals.sort(key=lambda p: p.entropy)  # stable: insertion order on ties
    return proposals


def proposal_candidates(
    image: ImageRecord,
    maps: dict[int, StrideMap],
    bank: CentroidBank,
    cfg: EulConfig,
) -> list[UnknownProposal]:
    """All ranked proposals for an image, before detection suppression."""
    stride_one = maps.get(1)
    if stride_one is None:
        raise DataError("no stride-1 feature map available")
    saliency = saliency_map(stride_one.data)
    thresholds = recursive_otsu(saliency.ravel(), cfg.depth)
    candidates: list[tuple[BoundingBox, int]] = []
    seen: set[tuple[float, float, float, float]] = set()
    for level, t in enumerate(thresholds):
        for box in regions_to_boxes(
            saliency > t, cfg.connectivity, cfg.min_region_pixels, stride_one.downsample_factor
        ):
            clipped = BoundingBox(
                x_min=min(box.x_min, float(image.width)),
                y_min=min(box.y_min, float(image.height)),
                x_max=min(box.x_max, float(image.width)),
                y_max=min(box.y_max, float(image.height)),
            )
            if clipped.width <= 0 or clipped.height <= 0:
                continue
            key = tuple(clipped.as_list())
            if key in seen:
                continue  # same region found at a lower threshold already
            seen.add(key)
            candidates.append((clipped, level))
    return rank_proposals(candidates, maps, bank)


def select_proposals(
    candidates: list[UnknownProposal],
    detections: list[Detection],
    cfg: EulConfig,
) -> list[UnknownProposal]:
    """Drop candidates covered by a detection, keep the top_k by entropy."""
    kept = [
        p
        for p in candidates
        if not any(iou(p.box, det.box) >= cfg.suppress_iou for det in detections)
    ]
    return kept[: cfg.top_k]


def eul_propose(
    image: ImageRecord,
    maps: dict[int, StrideMap],
    detections: list[Detection],
    bank: CentroidBank,
    cfg: EulConfig | None = None,
) -> list[UnknownProposal]:
    """End-to-end proposal mining for one image."""
    cfg = cfg or EulConfig()
    return select_proposals(proposal_candidates(image, maps, bank, cfg), detections, cfg)
