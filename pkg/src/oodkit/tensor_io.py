"""On-disk interchange format for dumped feature maps and detections.

A dataset is a JSON manifest plus one binary tensor file per image and
stride. The tensor format is deliberately dumb: magic ``FMAP``, a version
byte, a u8 rank, little-endian u32 dims, then the row-major float32 payload.
All validation errors raise :class:`FormatError` and name the offending
field or image so a bad dump is diagnosable from the message alone.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from oodkit.errors import FormatError

MAGIC = b"FMAP"
VERSION = 1

# Ground-truth class id reserved for objects outside the known vocabulary.
UNKNOWN_CLASS_ID = -1

_HEADER_PREFIX = struct.Struct("<4sBB")  # magic, version, ndim


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as a float32 tensor file (created atomically enough
    for our purposes: full buffer assembled first, single write)."""
    data = np.ascontiguousarray(array, dtype="<f4")
    if data.ndim < 1:
        raise FormatError("tensor rank must be >= 1")
    if data.ndim > 255:
        raise FormatError(f"tensor rank {data.ndim} exceeds format limit 255")
    if any(d < 1 for d in data.shape):
        raise FormatError(f"tensor dims must all be >= 1, got {data.shape}")
    header = _HEADER_PREFIX.pack(MAGIC, VERSION, data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header + dims + data.tobytes())


def _read_header(fh, path: str | Path) -> tuple[int, ...]:
    raw = fh.read(_HEADER_PREFIX.size)
    if len(raw) < _HEADER_PREFIX.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, ndim = _HEADER_PREFIX.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if ndim < 1:
        raise FormatError(f"{path}: rank must be >= 1")
    raw_dims = fh.read(4 * ndim)
    if len(raw_dims) < 4 * ndim:
        raise FormatError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{ndim}I", raw_dims)
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: dims must all be >= 1, got {shape}")
    return shape


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file back as a float32 array."""
    with open(path, "rb") as fh:
        shape = _read_header(fh, path)
        expected = 4 * int(np.prod(shape))
        payload = fh.read()
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def read_tensor_shape(path: str | Path) -> tuple[int, ...]:
    """Validate the header and payload length without loading the data."""
    with open(path, "rb") as fh:
        shape = _read_header(fh, path)
        header_end = fh.tell()
    expected = header_end + 4 * int(np.prod(shape))
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"{path}: file is {actual} bytes, expected {expected}")
    return shape


@dataclass
class BoundingBox:
    """Axis-aligned box in image pixels, corners (x_min, y_min, x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords, where: str = "box") -> "BoundingBox":
        if not isinstance(coords, (list, tuple)) or len(coords) != 4:
            raise FormatError(f"{where}: expected [x_min, y_min, x_max, y_max]")
        vals = []
        for v in coords:
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
                raise FormatError(f"{where}: coordinates must be finite numbers")
            vals.append(float(v))
        box = cls(*vals)
        if box.x_min < 0 or box.y_min < 0:
            raise FormatError(f"{where}: coordinates must be non-negative")
        if box.x_max <= box.x_min or box.y_max <= box.y_min:
            raise FormatError(f"{where}: box must have positive width and height")
        return box


@dataclass
class Detection:
    """One detector output: box, predicted class, confidence, stride of
    origin (1-based, 1 = highest resolution), raw pre-sigmoid class logits."""

    box: BoundingBox
    class_id: int
    confidence: float
    stride_index: int
    logits: np.ndarray


@dataclass
class GroundTruthObject:
    box: BoundingBox
    class_id: int  # UNKNOWN_CLASS_ID for out-of-vocabulary objects


@dataclass
class StrideMapRef:
    stride_index: int
    downsample_factor: int
    tensor_path: str


@dataclass
class StrideMap:
    """A loaded feature map: (channels, height, width) float32."""

    stride_index: int
    downsample_factor: int
    data: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    strides: list[StrideMapRef]
    detections: list[Detection]
    ground_truth: list[GroundTruthObject]


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    stride_count: int
    images: list[ImageRecord]
    root: Path = field(default_factory=Path)  # directory tensor paths resolve against

    def resolve(self, ref: StrideMapRef) -> Path:
        return self.root / ref.tensor_path

    def load_maps(self, image: ImageRecord) -> dict[int, StrideMap]:
        """Load every stride's feature map for one image, keyed by stride."""
        out = {}
        for ref in image.strides:
            data = read_tensor(self.resolve(ref))
            out[ref.stride_index] = StrideMap(ref.stride_index, ref.downsample_factor, data)
        return out


def _require(obj, key, kind, where, allow_bool=False):
    if key not in obj:
        raise FormatError(f"{where}.{key}: missing")
    val = obj[key]
    if isinstance(val, bool) and not allow_bool:
        raise FormatError(f"{where}.{key}: expected {kind.__name__}, got bool")
    if kind is float:
        if not isinstance(val, (int, float)) or not np.isfinite(val):
            raise FormatError(f"{where}.{key}: expected a finite number")
        return float(val)
    if not isinstance(val, kind):
        raise FormatError(f"{where}.{key}: expected {kind.__name__}")
    return val


def _parse_detection(obj, num_classes, stride_count, where) -> Detection:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    box = BoundingBox.from_list(obj.get("box"), f"{where}.box")
    class_id = _require(obj, "class_id", int, where)
    if not 0 <= class_id < num_classes:
        raise FormatError(f"{where}.class_id: {class_id} outside [0, {num_classes})")
    confidence = _require(obj, "confidence", float, where)
    if not 0.0 <= confidence <= 1.0:
        raise FormatError(f"{where}.confidence: {confidence} outside [0, 1]")
    stride_index = _require(obj, "stride_index", int, where)
    if not 1 <= stride_index <= stride_count:
        raise FormatError(f"{where}.stride_index: {stride_index} outside [1, {stride_count}]")
    logits = _require(obj, "logits", list, where)
    if len(logits) != num_classes:
        raise FormatError(f"{where}.logits: expected {num_classes} entries, got {len(logits)}")
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{where}.logits: entries must be finite")
    return Detection(box, class_id, confidence, stride_index, arr)


def _parse_ground_truth(obj, num_classes, where) -> GroundTruthObject:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    box = BoundingBox.from_list(obj.get("box"), f"{where}.box")
    class_id = _require(obj, "class_id", int, where)
    if class_id != UNKNOWN_CLASS_ID and not 0 <= class_id < num_classes:
        raise FormatError(
            f"{where}.class_id: {class_id} is neither {UNKNOWN_CLASS_ID} nor in [0, {num_classes})"
        )
    return GroundTruthObject(box, class_id)


def _parse_image(obj, num_classes, stride_count, where) -> ImageRecord:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    image_id = _require(obj, "image_id", str, where)
    if not image_id:
        raise FormatError(f"{where}.image_id: must be non-empty")
    width = _require(obj, "width", int, where)
    height = _require(obj, "height", int, where)
    if width < 1 or height < 1:
        raise FormatError(f"{where}: width/height must be >= 1")
    strides_raw = _require(obj, "strides", list, where)
    strides = []
    for i, s in enumerate(strides_raw):
        sw = f"{where}.strides[{i}]"
        if not isinstance(s, dict):
            raise FormatError(f"{sw}: expected an object")
        strides.append(
            StrideMapRef(
                _require(s, "stride_index", int, sw),
                _require(s, "downsample_factor", int, sw),
                _require(s, "tensor_path", str, sw),
            )
        )
    indices = sorted(s.stride_index for s in strides)
    if indices != list(range(1, stride_count + 1)):
        raise FormatError(
            f"{where}.strides: stride_index values {indices} != 1..{stride_count}"
        )
    strides.sort(key=lambda s: s.stride_index)
    factors = [s.downsample_factor for s in strides]
    if any(f < 1 for f in factors):
        raise FormatError(f"{where}.strides: downsample_factor must be >= 1")
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise FormatError(
            f"{where}.strides: downsample_factor must strictly increase, got {factors}"
        )
    detections = [
        _parse_detection(d, num_classes, stride_count, f"{where}.detections[{i}]")
        for i, d in enumerate(_require(obj, "detections", list, where))
    ]
    ground_truth = [
        _parse_ground_truth(g, num_classes, f"{where}.ground_truth[{i}]")
        for i, g in enumerate(_require(obj, "ground_truth", list, where))
    ]
    return ImageRecord(image_id, width, height, strides, detections, ground_truth)


def load_manifest(path: str | Path, check_tensors: bool = True) -> DatasetManifest:
    """Load and validate a dataset manifest.

    With ``check_tensors`` every referenced tensor file is opened and its
    header validated (payload length checked against the file size), and the
    per-image stride geometry is verified: stride 1 must carry the largest
    map and spatial size must not grow with stride index.
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: top level must be an object")
    name = _require(raw, "name", str, "manifest")
    num_classes = _require(raw, "num_classes", int, "manifest")
    stride_count = _require(raw, "stride_count", int, "manifest")
    if num_classes < 1:
        raise FormatError("manifest.num_classes: must be >= 1")
    if stride_count < 1:
        raise FormatError("manifest.stride_count: must be >= 1")
    images_raw = _require(raw, "images", list, "manifest")
    images = [
        _parse_image(img, num_classes, stride_count, f"manifest.images[{i}]")
        for i, img in enumerate(images_raw)
    ]
    seen: set[str] = set()
    for img in images:
        if img.image_id in seen:
            raise FormatError(f"duplicate image_id {img.image_id!r}")
        seen.add(img.image_id)
    manifest = DatasetManifest(name, num_classes, stride_count, images, root=path.parent)
    if check_tensors:
        _check_tensor_files(manifest)
    return manifest


def _check_tensor_files(manifest: DatasetManifest) -> None:
    for img in manifest.images:
        sizes = {}
        for ref in img.strides:
            tensor_path = manifest.resolve(ref)
            if not tensor_path.is_file():
                raise FormatError(
                    f"image {img.image_id!r}: missing tensor file {tensor_path}"
                )
            try:
                shape = read_tensor_shape(tensor_path)
            except FormatError as exc:
                raise FormatError(f"image {img.image_id!r}: {exc}") from exc
            if len(shape) != 3:
                raise FormatError(
                    f"image {img.image_id!r}: tensor {ref.tensor_path} must be "
                    f"(channels, height, width), got rank {len(shape)}"
                )
            sizes[ref.stride_index] = shape[1] * shape[2]
        if max(sizes.values()) != sizes[1]:
            raise FormatError(
                f"image {img.image_id!r}: stride 1 must carry the largest map"
            )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Serialize a manifest; tensor paths are written as-is (relative)."""
    doc = {
        "name": manifest.name,
        "num_classes": manifest.num_classes,
        "stride_count": manifest.stride_count,
        "images": [
            {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "strides": [
                    {
                        "stride_index": s.stride_index,
                        "downsample_factor": s.downsample_factor,
                        "tensor_path": s.tensor_path,
                    }
                    for s in img.strides
                ],
                "detections": [
                    {
                        "box": d.box.as_list(),
                        "class_id": d.class_id,
                        "confidence": d.confidence,
                        "stride_index": d.stride_index,
                        "logits": [float(v) for v in d.logits],
                    }
                    for d in img.detections
                ],
                "ground_truth": [
                    {"box": g.box.as_list(), "class_id": g.class_id}
                    for g in img.ground_truth
                ],
            }
            for img in manifest.images
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
