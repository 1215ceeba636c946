"""Ground-truth conversion from VOC XML and COCO JSON layouts.

Class names found in the caller's class list map to their index; every
other name maps to -1, the reserved id for objects the detector was not
trained on. Schemas are sniffed from content, not extension alone, and
anything unrecognisable raises ExportError rather than guessing.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ExportError

Box = tuple[float, float, float, float]

UNKNOWN_CLASS_ID = -1


@dataclass(frozen=True)
class GroundTruthEntry:
    box: Box
    class_id: int


def convert_annotations(
    sources: Iterable[Path],
    class_names: Sequence[str],
) -> dict[str, list[GroundTruthEntry]]:
    """Parse annotation files into per-image ground-truth lists.

    Returns a mapping keyed by image id (file name stem). A VOC file
    contributes one image; a COCO file contributes every image it
    declares, including those with zero annotations. Empty files yield
    empty lists. Later sources extend earlier ones for the same image.
    """
    index = {name: i for i, name in enumerate(class_names)}
    out: dict[str, list[GroundTruthEntry]] = {}
    for source in sources:
        path = Path(source)
        text = path.read_text(encoding="utf-8")
        if not text.strip():
            out.setdefault(path.stem, [])
            continue
        for image_id, entries in _parse_one(path, text, index):
            out.setdefault(image_id, []).extend(entries)
    return out


def _parse_one(
    path: Path, text: str, index: dict[str, int]
) -> list[tuple[str, list[GroundTruthEntry]]]:
    stripped = text.lstrip()
    if stripped.startswith("<"):
        return [_parse_voc(path, text, index)]
    if stripped.startswith("{"):
        return _parse_coco(path, text, index)
    raise ExportError(f"{path}: unrecognised annotation schema")


def _class_id(name: str, index: dict[str, int]) -> int:
    return index.get(name, UNKNOWN_CLASS_ID)


def _parse_voc(
    path: Path, text: str, index: dict[str, int]
) -> tuple[str, list[GroundTruthEntry]]:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ExportError(f"{path}: not well-formed XML: {exc}") from exc
    if root.tag != "annotation":
        raise ExportError(f"{path}: unrecognised annotation schema (root <{root.tag}>)")

    filename = root.findtext("filename")
    image_id = Path(filename).stem if filename else path.stem

    entries: list[GroundTruthEntry] = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        box_el = obj.find("bndbox")
        if name is None or box_el is None:
            raise ExportError(f"{path}: <object> missing name or bndbox")
        try:
            box = tuple(
                float(box_el.findtext(tag))  # type: ignore[arg-type]
                for tag in ("xmin", "ymin", "xmax", "ymax")
            )
        except (TypeError, ValueError) as exc:
            raise ExportError(f"{path}: malformed bndbox") from exc
        entries.append(GroundTruthEntry(box=box, class_id=_class_id(name, index)))
    return image_id, entries


def _parse_coco(
    path: Path, text: str, index: dict[str, int]
) -> list[tuple[str, list[GroundTruthEntry]]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExportError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not {"images", "annotations", "categories"} <= doc.keys():
        raise ExportError(f"{path}: unrecognised annotation schema")

    category_names = {cat["id"]: cat["name"] for cat in doc["categories"]}
    per_image: dict[int, list[GroundTruthEntry]] = {
        img["id"]: [] for img in doc["images"]
    }
    for ann in doc["annotations"]:
        image_key = ann["image_id"]
        if image_key not in per_image:
            raise ExportError(f"{path}: annotation references unknown image id {image_key}")
        try:
            name = category_names[ann["category_id"]]
        except KeyError as exc:
            raise ExportError(
                f"{path}: annotation references unknown category id {ann['category_id']}"
            ) from exc
        x, y, w, h = (float(v) for v in ann["bbox"])
        entry = GroundTruthEntry(box=(x, y, x + w, y + h), class_id=_class_id(name, index))
        per_image[image_key].append(entry)

    return [
        (Path(img["file_name"]).stem, per_image[img["id"]])
        for img in doc["images"]
    ]
