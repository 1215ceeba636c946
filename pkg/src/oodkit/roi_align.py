"""Region-of-interest feature pooling with bilinear sampling.

Pools a (channels, height, width) feature map over a box given in image
pixels. Boxes are clipped to the map's image-space extent first, then mapped
to feature coordinates; with ``aligned`` the half-pixel offset is subtracted
after scaling so sample positions line up with pixel centers. Each output
bin averages ``sampling_ratio**2`` bilinear samples placed at the fractions
(i + 0.5) / sampling_ratio of the bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodkit.errors import DataError, DegenerateBoxError
from oodkit.tensor_io import BoundingBox, Detection, StrideMap


@dataclass
class RoiAlignConfig:
    output_size: tuple[int, int] = (1, 1)  # (height, width) bins
    sampling_ratio: int = 2
    aligned: bool = True


def _bilinear(feature_map: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample all channels at continuous (y, x); outside the border -> 0."""
    _, height, width = feature_map.shape
    if y < -1.0 or y > height or x < -1.0 or x > width:
        return np.zeros(feature_map.shape[0], dtype=feature_map.dtype)
    y = min(max(y, 0.0), height - 1.0)
    x = min(max(x, 0.0), width - 1.0)
    y_low = int(y)
    x_low = int(x)
    y_high = min(y_low + 1, height - 1)
    x_high = min(x_low + 1, width - 1)
    ly = y - y_low
    lx = x - x_low
    hy = 1.0 - ly
    hx = 1.0 - lx
    return (
        hy * hx * feature_map[:, y_low, x_low]
        + hy * lx * feature_map[:, y_low, x_high]
        + ly * hx * feature_map[:, y_high, x_low]
        + ly * lx * feature_map[:, y_high, x_high]
    )


def roi_align(
    feature_map: np.ndarray,
    box: BoundingBox,
    spatial_scale: float,
    cfg: RoiAlignConfig | None = None,
) -> np.ndarray:
    """Pool ``feature_map`` over ``box`` into (channels, out_h, out_w)."""
    cfg = cfg or RoiAlignConfig()
    if feature_map.ndim != 3:
        raise DataError(f"feature map must be (C, H, W), got shape {feature_map.shape}")
    if cfg.sampling_ratio < 1:
        raise DataError(f"sampling_ratio must be >= 1, got {cfg.sampling_ratio}")
    _, height, width = feature_map.shape

    # Clip to the map's extent in image space before scaling.
    x_min = min(max(box.x_min, 0.0), width / spatial_scale)
    x_max = min(max(box.x_max, 0.0), width / spatial_scale)
    y_min = min(max(box.y_min, 0.0), height / spatial_scale)
    y_max = min(max(box.y_max, 0.0), height / spatial_scale)
    if x_max - x_min <= 0.0 or y_max - y_min <= 0.0:
        raise DegenerateBoxError(
            f"box {box.as_list()} has no area inside the map extent"
        )

    offset = 0.5 if cfg.aligned else 0.0
    roi_start_x = x_min * spatial_scale - offset
    roi_start_y = y_min * spatial_scale - offset
    roi_w = (x_max - x_min) * spatial_scale
    roi_h = (y_max - y_min) * spatial_scale
    if not cfg.aligned:
        roi_w = max(roi_w, 1.0)
        roi_h = max(roi_h, 1.0)

    out_h, out_w = cfg.output_size
    bin_h = roi_h / out_h
    bin_w = roi_w / out_w
    n = cfg.sampling_ratio
    out = np.zeros((feature_map.shape[0], out_h, out_w), dtype=np.float64)
    for ph in range(out_h):
        for pw in range(out_w):
            acc = np.zeros(feature_map.shape[0], dtype=np.float64)
            for iy in range(n):
                y = roi_start_y + ph * bin_h + (iy + 0.5) * bin_h / n
                for ix in range(n):
                    x = roi_start_x + pw * bin_w + (ix + 0.5) * bin_w / n
                    acc += _bilinear(feature_map, y, x)
            out[:, ph, pw] = acc / (n * n)
    return out.astype(np.float32)


def extract_detection_features(
    maps: dict[int, StrideMap],
    detections: list[Detection],
    cfg: RoiAlignConfig | None = None,
) -> list[np.ndarray]:
    """Pool each detection's box on the map of its stride of origin.

    Returns one flattened float32 vector per detection; the length is the
    channel count of that stride times the number of output bins, so vectors
    from different strides generally differ in length.
    """
    cfg = cfg or RoiAlignConfig()
    features = []
    for det in detections:
        stride_map = maps.get(det.stride_index)
        if stride_map is None:
            raise DataError(f"no feature map for stride {det.stride_index}")
        scale = 1.0 / stride_map.downsample_factor
        pooled = roi_align(stride_map.data, det.box, scale, cfg)
        features.append(pooled.reshape(-1))
    return features
