"""Post-hoc unknown-object detection for one-stage detectors.

The toolkit calibrates per-class, per-stride centroid banks on the feature
maps of a frozen detector, scores new detections by distance to those
centroids, and compares against logits-based baselines and fusions of both.
Everything operates on dumped tensors and a JSON manifest; no detector
weights are needed at evaluation time.
"""

__version__ = "0.1.0"

from oodkit.errors import (
    ConfigError,
    DataError,
    DegenerateBoxError,
    DegenerateMapError,
    FormatError,
    OodkitError,
)

__all__ = [
    "__version__",
    "OodkitError",
    "ConfigError",
    "DataError",
    "DegenerateBoxError",
    "DegenerateMapError",
    "FormatError",
]
