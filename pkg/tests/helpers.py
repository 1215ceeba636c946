"""Hand-built datasets with exact feature control.

These exploit the constant-map trick: a detection box over a constant
feature map pools to exactly that constant, so the feature vector seen
downstream is chosen directly by the test.
"""

import numpy as np

from oodkit.tensor_io import (
    BoundingBox,
    DatasetManifest,
    Detection,
    GroundTruthObject,
    ImageRecord,
    StrideMapRef,
    write_tensor,
)

DEFAULT_BOX = BoundingBox(16.0, 16.0, 48.0, 48.0)


def margin_logits(num_classes: int, class_id: int, margin: float = 6.0) -> np.ndarray:
    logits = np.zeros(num_classes)
    logits[class_id] = margin
    return logits


def constant_maps_image(
    root,
    image_id: str,
    features: dict[int, np.ndarray],
    factors: dict[int, int],
    map_hw: dict[int, tuple[int, int]],
    detections: list[Detection],
    ground_truth: list[GroundTruthObject],
    width: int = 64,
    height: int = 64,
) -> ImageRecord:
    """One image whose stride maps are constant per channel.

    ``features[stride]`` gives the per-channel constants; every box pooled
    from that stride therefore yields exactly this vector.
    """
    (root / "tensors").mkdir(exist_ok=True)
    refs = []
    for stride in sorted(features):
        vec = np.asarray(features[stride], dtype=np.float64)
        h, w = map_hw[stride]
        data = np.broadcast_to(vec[:, None, None], (len(vec), h, w))
        path = f"tensors/{image_id}_s{stride}.bin"
        write_tensor(root / path, data)
        refs.append(StrideMapRef(stride, factors[stride], path))
    return ImageRecord(image_id, width, height, refs, detections, ground_truth)


def feature_dataset(
    root,
    samples: list[tuple[int, int, np.ndarray]],
    num_classes: int,
    stride_count: int = 1,
    factor: int = 8,
    confidences: list[float] | None = None,
    logits_rows: list[np.ndarray] | None = None,
    name: str = "fixture",
) -> DatasetManifest:
    """One image per sample; sample = (stride_index, class_id, feature).

    Each image provides all ``stride_count`` maps but only the sample's
    stride is non-zero; the single detection sits exactly on its ground
    truth, so every sample becomes a correct prediction at fit time.
    """
    images = []
    for idx, (stride, class_id, feature) in enumerate(samples):
        feature = np.atleast_1d(np.asarray(feature, dtype=np.float64))
        dim = len(feature)
        features = {
            s: (feature if s == stride else np.zeros(dim))
            for s in range(1, stride_count + 1)
        }
        factors = {s: factor * 2 ** (s - 1) for s in range(1, stride_count + 1)}
        map_hw = {s: (64 // factors[s], 64 // factors[s]) for s in factors}
        confidence = confidences[idx] if confidences is not None else 0.9
        logits = (
            logits_rows[idx]
            if logits_rows is not None
            else margin_logits(num_classes, class_id)
        )
        det = Detection(DEFAULT_BOX, class_id, confidence, stride, np.asarray(logits, float))
        gt = GroundTruthObject(DEFAULT_BOX, class_id)
        images.append(
            constant_maps_image(
                root, f"img_{idx:04d}", features, factors, map_hw, [det], [gt]
            )
        )
    return DatasetManifest(name, num_classes, stride_count, images, root=root)
