"""Synthetic detector dumps with known ground truth.

Images are divided into a grid of non-overlapping slots; each object gets a
slot, a (stride, class) cell assigned round-robin so every cell fills
evenly, and a feature vector drawn around its cell's cluster mean. The
vector is painted as a constant patch over the box footprint (boxes are
feature-grid aligned and at least two feature pixels wide), so pooling the
ground-truth box reads the sampled vector back. Unknown objects shift the
vector along a random direction and claim a known class with near-uniform
logits; in-distribution logits carry a clear margin on the true class.

Everything derives from per-image seeds, so generation is reproducible
byte-for-byte and images could be produced in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from oodkit.errors import ConfigError
from oodkit.tensor_io import (
    BoundingBox,
    DatasetManifest,
    Detection,
    GroundTruthObject,
    ImageRecord,
    StrideMapRef,
    UNKNOWN_CLASS_ID,
    save_manifest,
    write_tensor,
)


@dataclass
class SynthConfig:
    name: str = "synth"
    num_classes: int = 5
    stride_count: int = 3
    channels: tuple[int, ...] = (8, 12, 16)
    downsample_factors: tuple[int, ...] = (8, 16, 32)
    image_width: int = 128
    image_height: int = 128
    num_images: int = 50
    objects_per_image: int = 4
    unknown_fraction: float = 0.0
    id_sigma: float = 0.25
    ood_shift: float = 8.0  # in units of id_sigma
    mean_scale: float = 3.0
    clusters_per_cell: int = 1
    label_noise: float = 0.0  # fraction of known detections claiming a wrong class
    logit_base: float = 0.0
    logit_margin: float = 4.0
    logit_noise: float = 0.5
    confidence_floor: float = 0.05
    seed: int = 0
    image_seed: int = 0  # vary to redraw images from the same cluster means
    # explicit per-(stride_index, class) cluster means, rows = clusters;
    # sampled from the seed when omitted
    cluster_means: dict[tuple[int, int], np.ndarray] | None = None


@dataclass
class EulSceneConfig:
    name: str = "eul-scenes"
    num_classes: int = 5
    stride_count: int = 3
    channels: tuple[int, ...] = (8, 12, 16)
    downsample_factors: tuple[int, ...] = (8, 16, 32)
    image_width: int = 128
    image_height: int = 128
    num_scenes: int = 100
    blobs_per_scene: int = 1
    amplitude: float = 2.0
    seed: int = 0


def _validate_geometry(cfg) -> tuple[int, int, int]:
    """Common layout checks; returns (slot_px, slots_x, slots_y)."""
    if len(cfg.channels) != cfg.stride_count or len(cfg.downsample_factors) != cfg.stride_count:
        raise ConfigError("channels and downsample_factors must have stride_count entries")
    factors = cfg.downsample_factors
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ConfigError(f"downsample_factors must strictly increase, got {factors}")
    slot_px = 2 * factors[-1]
    if cfg.image_width % slot_px or cfg.image_height % slot_px:
        raise ConfigError(
            f"image size must be a multiple of {slot_px} (two pixels of the coarsest stride)"
        )
    if any(slot_px % f for f in factors):
        raise ConfigError(f"every downsample factor must divide the slot size {slot_px}")
    return slot_px, cfg.image_width // slot_px, cfg.image_height // slot_px


def sample_cluster_means(cfg: SynthConfig) -> dict[tuple[int, int], np.ndarray]:
    """Per (stride_index, class) cluster means, depending on the seed only
    (not on image_seed), so two generations share a feature distribution."""
    rng = np.random.default_rng([cfg.seed, 1])
    means = {}
    for stride in range(1, cfg.stride_count + 1):
        dim = cfg.channels[stride - 1]
        for class_id in range(cfg.num_classes):
            means[(stride, class_id)] = cfg.mean_scale * rng.normal(
                size=(cfg.clusters_per_cell, dim)
            )
    return means


def resolve_cluster_means(cfg: SynthConfig) -> dict[tuple[int, int], np.ndarray]:
    if cfg.cluster_means is None:
        return sample_cluster_means(cfg)
    means = {}
    for stride in range(1, cfg.stride_count + 1):
        for class_id in range(cfg.num_classes):
            key = (stride, class_id)
            if key not in cfg.cluster_means:
                raise ConfigError(f"cluster_means missing entry for {key}")
            arr = np.asarray(cfg.cluster_means[key], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != cfg.channels[stride - 1]:
                raise ConfigError(
                    f"cluster_means[{key}] must be (clusters, {cfg.channels[stride - 1]})"
                )
            means[key] = arr
    return means


def _empty_maps(cfg) -> list[np.ndarray]:
    maps = []
    for stride in range(cfg.stride_count):
        f = cfg.downsample_factors[stride]
        maps.append(
            np.zeros(
                (cfg.channels[stride], cfg.image_height // f, cfg.image_width // f),
                dtype=np.float32,
            )
        )
    return maps


def _id_logits(rng, cfg: SynthConfig, class_id: int) -> np.ndarray:
    logits = cfg.logit_base + cfg.logit_noise * rng.normal(size=cfg.num_classes)
    logits[class_id] += cfg.logit_margin
    return logits


def _write_image(out_dir: Path, cfg, image_id: str, maps: list[np.ndarray]) -> list[StrideMapRef]:
    refs = []
    for stride in range(1, cfg.stride_count + 1):
        rel = f"tensors/{image_id}_s{stride}.bin"
        write_tensor(out_dir / rel, maps[stride - 1])
        refs.append(StrideMapRef(stride, cfg.downsample_factors[stride - 1], rel))
    return refs


def generate(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a full synthetic dataset under ``out_dir``."""
    slot_px, slots_x, slots_y = _validate_geometry(cfg)
    n_slots = slots_x * slots_y
    if not 1 <= cfg.objects_per_image <= n_slots:
        raise ConfigError(
            f"objects_per_image must be in [1, {n_slots}] for this image size"
        )
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if cfg.stride_count < 1:
        raise ConfigError("stride_count must be at least 1")
    if cfg.ood_shift < 0:
        raise ConfigError("ood_shift must be non-negative")
    for name in ("unknown_fraction", "label_noise"):
        value = getattr(cfg, name)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{name} must be in [0, 1], got {value}")
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    means = resolve_cluster_means(cfg)
    n_cells = cfg.stride_count * cfg.num_classes

    images = []
    for idx in range(cfg.num_images):
        rng = np.random.default_rng([cfg.seed, 2, cfg.image_seed, idx])
        image_id = f"img_{idx:05d}"
        maps = _empty_maps(cfg)
        slots = rng.permutation(n_slots)[: cfg.objects_per_image]
        detections: list[Detection] = []
        ground_truth: list[GroundTruthObject] = []
        for j, slot in enumerate(slots):
            cell = (idx * cfg.objects_per_image + j) % n_cells
            stride = cell // cfg.num_classes + 1
            class_id = cell % cfg.num_classes
            factor = cfg.downsample_factors[stride - 1]
            cap = slot_px // factor  # slot footprint in feature pixels
            is_unknown = rng.random() < cfg.unknown_fraction
            mislabeled = rng.random() < cfg.label_noise and not is_unknown
            cluster = int(rng.integers(len(means[(stride, class_id)])))
            w = int(rng.integers(2, cap + 1))
            h = int(rng.integers(2, cap + 1))
            col0 = (int(slot) % slots_x) * cap + int(rng.integers(cap - w + 1))
            row0 = (int(slot) // slots_x) * cap + int(rng.integers(cap - h + 1))

            dim = cfg.channels[stride - 1]
            feature = means[(stride, class_id)][cluster] + cfg.id_sigma * rng.normal(size=dim)
            if is_unknown:
                direction = rng.normal(size=dim)
                direction /= np.linalg.norm(direction)
                feature = feature + cfg.ood_shift * cfg.id_sigma * direction
            maps[stride - 1][:, row0 : row0 + h, col0 : col0 + w] = feature[:, None, None]

            box = BoundingBox(
                float(col0 * factor),
                float(row0 * factor),
                float((col0 + w) * factor),
                float((row0 + h) * factor),
            )
            confidence = float(rng.uniform(cfg.confidence_floor, 1.0))
            claimed = class_id
            if mislabeled:
                claimed = (class_id + 1 + int(rng.integers(cfg.num_classes - 1))) % cfg.num_classes
            if is_unknown:
                logits = cfg.logit_base + cfg.logit_noise * rng.normal(size=cfg.num_classes)
                ground_truth.append(GroundTruthObject(box, UNKNOWN_CLASS_ID))
            else:
                # the detector is confident in what it claims, even when wrong
                logits = _id_logits(rng, cfg, claimed)
                ground_truth.append(GroundTruthObject(box, class_id))
            detections.append(Detection(box, claimed, confidence, stride, logits))

        refs = _write_image(out_dir, cfg, image_id, maps)
        images.append(
            ImageRecord(image_id, cfg.image_width, cfg.image_height, refs, detections, ground_truth)
        )

    manifest = DatasetManifest(
        cfg.name, cfg.num_classes, cfg.stride_count, images, root=out_dir
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def generate_eul_scenes(cfg: EulSceneConfig, out_dir: str | Path) -> DatasetManifest:
    """Scenes with unknown blobs painted on the stride-1 map and no
    detections: every unknown is uncovered, exercising proposal mining."""
    slot_px, slots_x, slots_y = _validate_geometry(cfg)
    n_slots = slots_x * slots_y
    if cfg.blobs_per_scene > n_slots:
        raise ConfigError(f"at most {n_slots} blobs fit per scene")
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)

    factor = cfg.downsample_factors[0]
    cap = slot_px // factor
    images = []
    for idx in range(cfg.num_scenes):
        rng = np.random.default_rng([cfg.seed, 3, idx])
        image_id = f"scene_{idx:05d}"
        maps = _empty_maps(cfg)
        ground_truth = []
        slots = rng.permutation(n_slots)[: cfg.blobs_per_scene]
        for slot in slots:
            w = int(rng.integers(2, cap + 1))
            h = int(rng.integers(2, cap + 1))
            col0 = (int(slot) % slots_x) * cap + int(rng.integers(cap - w + 1))
            row0 = (int(slot) // slots_x) * cap + int(rng.integers(cap - h + 1))
            blob = cfg.amplitude * rng.choice([-1.0, 1.0], size=cfg.channels[0])
            maps[0][:, row0 : row0 + h, col0 : col0 + w] = blob[:, None, None]
            ground_truth.append(
                GroundTruthObject(
                    BoundingBox(
                        float(col0 * factor),
                        float(row0 * factor),
                        float((col0 + w) * factor),
                        float((row0 + h) * factor),
                    ),
                    UNKNOWN_CLASS_ID,
                )
            )
        refs = _write_image(out_dir, cfg, image_id, maps)
        images.append(
            ImageRecord(image_id, cfg.image_width, cfg.image_height, refs, [], ground_truth)
        )

    manifest = DatasetManifest(
        cfg.name, cfg.num_classes, cfg.stride_count, images, root=out_dir
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
