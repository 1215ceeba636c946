"""Bridge from a running detector to oodkit's on-disk dataset format."""

from .annotations import GroundTruthEntry, convert_annotations
from .errors import ExportError
from .export import ExportSpec, RawDetection, TapSpec, export
from .fmap_io import tensor_bytes, write_manifest, write_tensor
from .tiny import TAP_FACTORS, TinyDetector

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportSpec",
    "GroundTruthEntry",
    "RawDetection",
    "TAP_FACTORS",
    "TapSpec",
    "TinyDetector",
    "convert_annotations",
    "export",
    "tensor_bytes",
    "write_manifest",
    "write_tensor",
    "__version__",
]
