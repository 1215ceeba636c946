"""Export a detector's per-stride feature maps and detections to disk.

The model is user-supplied and treated as a black box with two
obligations: calling it on a (1, 3, H, W) float batch returns one
`RawDetection` list per batch item, and the declared tap modules emit
the per-stride feature maps as their forward outputs. Everything else
(layer choice, decoding, thresholding inside the model) is the caller's
business; this module only captures, validates, and serialises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .annotations import GroundTruthEntry
from .errors import ExportError
from .fmap_io import build_manifest, write_manifest, write_tensor

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class RawDetection:
    """One decoded detection as handed over by the model."""

    box: Box
    class_id: int
    confidence: float
    stride_index: int
    logits: tuple[float, ...]


@dataclass(frozen=True)
class TapSpec:
    """A feature-map capture point: a submodule name plus its stride."""

    name: str
    downsample_factor: int


@dataclass
class ExportSpec:
    model: Any
    taps: Sequence[TapSpec]
    images: Sequence[Path]
    out_dir: Path
    class_names: Sequence[str]
    confidence_floor: float = 0.001
    ground_truth: Mapping[str, Sequence[GroundTruthEntry]] | None = None
    name: str = "export"
    batch_size: int = field(default=1, repr=False)


def export(spec: ExportSpec) -> Path:
    """Run the model over the image list and write a dataset bundle.

    Writes one FMAP tensor per (image, tap) under ``out_dir/tensors/``
    and a ``manifest.json`` next to them; returns the dataset directory.
    """
    _validate_spec(spec)
    out_dir = Path(spec.out_dir)
    num_classes = len(spec.class_names)

    captures: dict[str, torch.Tensor] = {}
    handles = []
    try:
        for tap in spec.taps:
            try:
                module = spec.model.get_submodule(tap.name)
            except AttributeError as exc:
                raise ExportError(f"tap '{tap.name}' does not resolve to a module") from exc
            handles.append(module.register_forward_hook(_capture_into(captures, tap.name)))

        spec.model.eval()
        image_entries = []
        for path in spec.images:
            image_entries.append(
                _export_one(spec, Path(path), out_dir, num_classes, captures)
            )
    finally:
        for handle in handles:
            handle.remove()

    manifest = build_manifest(
        name=spec.name,
        num_classes=num_classes,
        stride_count=len(spec.taps),
        images=image_entries,
    )
    write_manifest(out_dir / "manifest.json", manifest)
    return out_dir


def _capture_into(captures: dict[str, torch.Tensor], name: str):
    def hook(_module, _inputs, output):
        captures[name] = output

    return hook


def _validate_spec(spec: ExportSpec) -> None:
    if not spec.taps:
        raise ExportError("at least one stride tap is required")
    names = [tap.name for tap in spec.taps]
    if len(set(names)) != len(names):
        raise ExportError("tap names must be unique")
    factors = [tap.downsample_factor for tap in spec.taps]
    if any(f < 1 for f in factors):
        raise ExportError("downsample factors must be >= 1")
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ExportError(f"downsample factors must be strictly increasing, got {factors}")
    if not spec.images:
        raise ExportError("image list is empty")
    stems = [Path(p).stem for p in spec.images]
    duplicates = {s for s in stems if stems.count(s) > 1}
    if duplicates:
        raise ExportError(f"duplicate image ids: {sorted(duplicates)}")
    if not spec.class_names:
        raise ExportError("class list is empty")
    if not 0.0 <= spec.confidence_floor <= 1.0:
        raise ExportError(f"confidence floor {spec.confidence_floor} outside [0, 1]")


def _load_image(path: Path) -> tuple[torch.Tensor, int, int]:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            width, height = rgb.size
            pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    except OSError as exc:
        raise ExportError(f"cannot read image {path}: {exc}") from exc
    batch = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
    return batch, width, height


def _export_one(
    spec: ExportSpec,
    path: Path,
    out_dir: Path,
    num_classes: int,
    captures: dict[str, torch.Tensor],
) -> dict[str, Any]:
    image_id = path.stem
    batch, width, height = _load_image(path)

    captures.clear()
    with torch.no_grad():
        per_image = spec.model(batch)
    detections = per_image[0]

    strides = []
    for k, tap in enumerate(spec.taps, start=1):
        if tap.name not in captures:
            raise ExportError(f"tap '{tap.name}' never fired during inference")
        feature = captures[tap.name]
        if feature.ndim != 4 or feature.shape[0] != 1:
            raise ExportError(
                f"tap '{tap.name}' produced shape {tuple(feature.shape)}, "
                "expected (1, channels, height, width)"
            )
        fmap = feature.squeeze(0).detach().cpu().numpy().astype(np.float32)
        expect_h = -(-height // tap.downsample_factor)
        expect_w = -(-width // tap.downsample_factor)
        if fmap.shape[1:] != (expect_h, expect_w):
            raise ExportError(
                f"tap '{tap.name}': factor {tap.downsample_factor} on a "
                f"{width}x{height} image implies a {expect_h}x{expect_w} map, "
                f"got {fmap.shape[1]}x{fmap.shape[2]}"
            )
        rel_path = f"tensors/{image_id}_s{k}.bin"
        write_tensor(out_dir / rel_path, fmap)
        strides.append(
            {
                "stride_index": k,
                "downsample_factor": tap.downsample_factor,
                "tensor_path": rel_path,
            }
        )

    det_entries = []
    for det in detections:
        if not 0 <= det.class_id < num_classes:
            raise ExportError(
                f"{image_id}: detection class_id {det.class_id} outside 0..{num_classes - 1}"
            )
        if len(det.logits) != num_classes:
            raise ExportError(
                f"{image_id}: detection carries {len(det.logits)} logits, "
                f"expected {num_classes}"
            )
        if not 1 <= det.stride_index <= len(spec.taps):
            raise ExportError(
                f"{image_id}: detection stride_index {det.stride_index} "
                f"outside 1..{len(spec.taps)}"
            )
        if det.confidence < spec.confidence_floor:
            continue
        box = _clip_box(det.box, width, height)
        if box is None:
            continue
        det_entries.append(
            {
                "box": list(box),
                "class_id": int(det.class_id),
                "confidence": float(det.confidence),
                "stride_index": int(det.stride_index),
                "logits": [float(v) for v in det.logits],
            }
        )

    gt_entries = []
    provided = (spec.ground_truth or {}).get(image_id, [])
    for gt in provided:
        if gt.class_id != -1 and not 0 <= gt.class_id < num_classes:
            raise ExportError(
                f"{image_id}: ground-truth class_id {gt.class_id} is neither -1 "
                f"nor in 0..{num_classes - 1}"
            )
        gt_entries.append({"box": list(gt.box), "class_id": int(gt.class_id)})

    return {
        "image_id": image_id,
        "width": width,
        "height": height,
        "strides": strides,
        "detections": det_entries,
        "ground_truth": gt_entries,
    }


def _clip_box(box: Box, width: int, height: int) -> Box | None:
    x0 = min(max(float(box[0]), 0.0), float(width))
    y0 = min(max(float(box[1]), 0.0), float(height))
    x1 = min(max(float(box[2]), 0.0), float(width))
    y1 = min(max(float(box[3]), 0.0), float(height))
    if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
        return None
    return (x0, y0, x1, y1)
