"""Saliency thresholding, region extraction, and entropy-ranked unknown proposals."""

import numpy as np
import pytest

from helpers import margin_logits
from oodkit.errors import ConfigError, DataError, DegenerateMapError
from oodkit.eul import (
    EulConfig,
    class_distance_entropy,
    eul_propose,
    otsu_threshold,
    proposal_candidates,
    rank_proposals,
    recursive_otsu,
    regions_to_boxes,
    saliency_map,
    select_proposals,
)
from oodkit.fmap import CellRecord, CentroidBank, ThresholdStats
from oodkit.metrics import iou
from oodkit.roi_align import RoiAlignConfig
from oodkit.tensor_io import BoundingBox, Detection, ImageRecord, StrideMap

# --- saliency ------------------------------------------------------------------


def test_saliency_zero_for_identical_channels():
    data = np.tile(np.arange(12.0).reshape(1, 3, 4), (5, 1, 1))
    np.testing.assert_array_equal(saliency_map(data), np.zeros((3, 4)))


def test_saliency_two_channel_worked_example():
    # channels 0 and 2: mean 1, deviations 1 and 1
    data = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])
    np.testing.assert_array_equal(saliency_map(data), np.ones((2, 2)))


def test_saliency_matches_loop_oracle():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(8, 4, 4))
    got = saliency_map(data)
    for r in range(4):
        for c in range(4):
            pixel = data[:, r, c]
            want = np.abs(pixel - pixel.mean()).mean()
            assert got[r, c] == pytest.approx(want, abs=1e-12)


def test_saliency_single_channel_warns_and_zeroes():
    with pytest.warns(RuntimeWarning):
        got = saliency_map(np.ones((1, 3, 3)))
    np.testing.assert_array_equal(got, np.zeros((3, 3)))


def test_saliency_rejects_wrong_rank():
    with pytest.raises(DataError):
        saliency_map(np.ones((4, 4)))


# --- Otsu thresholding ------------------------------------------------------------


def _oracle_otsu(values):
    """Plain-loop re-derivation over the same 256-bin histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=256, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2.0
    best_sigma, best_edge = -1.0, None
    for k in range(1, 256):
        n0, n1 = counts[:k].sum(), counts[k:].sum()
        if n0 == 0 or n1 == 0:
            continue
        mu0 = (counts[:k] * centers[:k]).sum() / n0
        mu1 = (counts[k:] * centers[k:]).sum() / n1
        sigma = n0 * n1 * (mu0 - mu1) ** 2
        if sigma > best_sigma:
            best_sigma, best_edge = sigma, edges[k]
    return best_edge


def test_otsu_worked_example():
    # {1,1,2} vs {8,9,9}: the split lands just above 2 (bin width 1/32)
    values = np.array([1.0, 1.0, 2.0, 8.0, 9.0, 9.0])
    assert otsu_threshold(values) == pytest.approx(2.03125, abs=1e-12)


def test_otsu_bimodal_exact_separation():
    values = np.concatenate([np.zeros(50), np.full(50, 10.0)])
    t = otsu_threshold(values)
    assert t == pytest.approx(10.0 / 256.0, abs=1e-12)  # ties pick the lowest edge
    assert np.array_equal(values > t, values == 10.0)


def test_otsu_matches_loop_oracle():
    """Empty histogram bins between modes make the variance curve exactly
    flat, and summation order breaks those ties differently, so the oracle
    comparison is on the induced partition rather than the raw edge."""
    rng = np.random.default_rng(1)
    for _ in range(40):
        values = np.concatenate(
            [rng.normal(0, 1, int(rng.integers(20, 80))), rng.normal(6, 1, int(rng.integers(20, 80)))]
        )
        got = otsu_threshold(values)
        want = _oracle_otsu(values)
        np.testing.assert_array_equal(values > got, values > want)


def test_otsu_affine_equivariance():
    rng = np.random.default_rng(2)
    values = np.concatenate([rng.normal(0, 1, 60), rng.normal(5, 1, 60)])
    t = otsu_threshold(values)
    assert otsu_threshold(3.0 * values + 11.0) == pytest.approx(3.0 * t + 11.0, rel=1e-9)


def test_otsu_rejects_constant_or_empty():
    with pytest.raises(DegenerateMapError):
        otsu_threshold(np.full(30, 2.5))
    with pytest.raises(DegenerateMapError):
        otsu_threshold(np.array([]))


# --- recursive thresholds -----------------------------------------------------------


def test_recursive_depth_one_is_plain_otsu():
    rng = np.random.default_rng(3)
    values = rng.normal(size=100)
    assert recursive_otsu(values, depth=1) == [otsu_threshold(values)]


def test_recursive_trimodal_two_thresholds():
    values = np.concatenate([np.zeros(40), np.full(40, 5.0), np.full(40, 10.0)])
    t1, t2 = recursive_otsu(values, depth=2)
    assert t1 == pytest.approx(10.0 / 256.0, abs=1e-12)
    assert t2 == pytest.approx(5.0 + 5.0 / 256.0, abs=1e-12)
    assert t1 < t2


def test_recursive_stops_on_small_tail():
    values = np.concatenate([np.zeros(30), np.linspace(10.0, 11.0, 15)])
    assert len(recursive_otsu(values, depth=3)) == 1


def test_recursive_constant_map_yields_nothing():
    assert recursive_otsu(np.zeros(256), depth=2) == []


def test_recursive_rejects_bad_depth():
    with pytest.raises(ConfigError):
        recursive_otsu(np.arange(100.0), depth=0)


# --- regions --------------------------------------------------------------------


def test_regions_worked_example():
    binary = np.zeros((8, 8), dtype=bool)
    binary[1:3, 3:5] = True
    boxes = regions_to_boxes(binary, connectivity=8, downsample_factor=8)
    assert [b.as_list() for b in boxes] == [[24.0, 8.0, 40.0, 24.0]]


def test_regions_diagonal_connectivity():
    binary = np.array([[1, 0], [0, 1]], dtype=bool)
    assert len(regions_to_boxes(binary, connectivity=8)) == 1
    four = regions_to_boxes(binary, connectivity=4)
    assert [b.as_list() for b in four] == [[0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]]


def test_regions_min_pixel_filter():
    binary = np.zeros((6, 6), dtype=bool)
    binary[0, 0] = True  # lone pixel
    binary[3:5, 3:5] = True  # 4-pixel block
    boxes = regions_to_boxes(binary, connectivity=4, min_region_pixels=2)
    assert [b.as_list() for b in boxes] == [[3.0, 3.0, 5.0, 5.0]]


def _flood_boxes(binary, connectivity, min_px, factor):
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    out = []
    for r0 in range(h):
        for c0 in range(w):
            if not binary[r0, c0] or seen[r0, c0]:
                continue
            stack, pixels = [(r0, c0)], []
            seen[r0, c0] = True
            while stack:
                r, c = stack.pop()
                pixels.append((r, c))
                for dr, dc in offsets:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and binary[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            if len(pixels) < min_px:
                continue
            rows = [p[0] for p in pixels]
            cols = [p[1] for p in pixels]
            out.append(
                [
                    min(cols) * factor,
                    min(rows) * factor,
                    (max(cols) + 1) * factor,
                    (max(rows) + 1) * factor,
                ]
            )
    out.sort(key=lambda b: (b[1], b[0], b[3], b[2]))
    return [[float(v) for v in b] for b in out]


def test_regions_match_flood_fill_oracle():
    rng = np.random.default_rng(4)
    for conn in (4, 8):
        for min_px in (1, 3):
            for _ in range(25):
                binary = rng.random((10, 12)) < 0.4
                got = [b.as_list() for b in regions_to_boxes(binary, conn, min_px, 2)]
                assert got == _flood_boxes(binary, conn, min_px, 2)


def test_regions_reject_bad_connectivity():
    with pytest.raises(ConfigError):
        regions_to_boxes(np.ones((2, 2), dtype=bool), connectivity=6)


# --- entropy -----------------------------------------------------------------------


def test_entropy_uniform_profile_is_one():
    for c in range(2, 51):
        assert class_distance_entropy(np.full(c, 3.7)) == pytest.approx(1.0, abs=1e-12)


def test_entropy_single_nonzero_distance_is_zero():
    assert class_distance_entropy(np.array([0.0, 2.0, 0.0])) <= 1e-12


def test_entropy_hand_worked_value():
    # profile (1, 1, 2) normalizes to (1/4, 1/4, 1/2): H = 1.5 ln2 / ln3
    want = 1.5 * np.log(2.0) / np.log(3.0)
    assert class_distance_entropy(np.array([1.0, 1.0, 2.0])) == pytest.approx(want, abs=1e-12)


def test_entropy_all_zero_warns_and_returns_one():
    with pytest.warns(RuntimeWarning):
        assert class_distance_entropy(np.zeros(4)) == 1.0


def test_entropy_needs_two_classes():
    with pytest.raises(DataError):
        class_distance_entropy(np.array([1.0]))


# --- ranking and selection ------------------------------------------------------------


def _stats():
    return ThresholdStats(1.0, 0.0, 2.0, 30)


def _eul_bank(centroids_by_class):
    cells = {}
    for c, centroid in centroids_by_class.items():
        cells[(1, c)] = CellRecord(
            stride_index=1,
            class_id=c,
            centroids=np.asarray(centroid, dtype=np.float64).reshape(1, -1),
            method_used="one",
            sample_count=30,
            own=_stats(),
            effective=_stats(),
            threshold_level="cell",
        )
    return CentroidBank(
        num_classes=max(centroids_by_class) + 1,
        stride_count=1,
        distance="l2",
        target_tpr=0.95,
        min_samples_per_cell=20,
        roi=RoiAlignConfig(),
        cells=cells,
        class_stats={c: _stats() for c in centroids_by_class},
        global_stats=_stats(),
    )


def _split_map():
    """Left half of the 16x16 stride-1 map matches class 0 exactly; the
    right half sits equidistant from both centroids."""
    data = np.zeros((2, 16, 16), dtype=np.float32)
    data[0, :, :8] = 1.0
    data[0, :, 8:] = 0.6
    data[1, :, 8:] = 0.6
    return {1: StrideMap(1, 8, data)}


LEFT_BOX = BoundingBox(16.0, 16.0, 48.0, 48.0)
RIGHT_BOX = BoundingBox(80.0, 16.0, 112.0, 48.0)


def test_rank_orders_by_entropy():
    bank = _eul_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    ranked = rank_proposals([(RIGHT_BOX, 0), (LEFT_BOX, 1)], _split_map(), bank)
    assert [p.box for p in ranked] == [LEFT_BOX, RIGHT_BOX]
    assert ranked[0].entropy == pytest.approx(0.0, abs=1e-12)
    assert ranked[0].pseudo_confidence == pytest.approx(1.0, abs=1e-12)
    assert ranked[1].entropy == pytest.approx(1.0, abs=1e-12)
    assert ranked[0].source_threshold_level == 1


def test_rank_tie_keeps_insertion_order():
    bank = _eul_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    near_right = BoundingBox(80.0, 64.0, 112.0, 96.0)
    ranked = rank_proposals([(RIGHT_BOX, 0), (near_right, 0)], _split_map(), bank)
    assert [p.box for p in ranked] == [RIGHT_BOX, near_right]


def test_rank_single_class_bank_warns():
    bank = _eul_bank({0: [1.0, 0.0]})
    with pytest.warns(RuntimeWarning):
        ranked = rank_proposals([(LEFT_BOX, 0)], _split_map(), bank)
    assert ranked[0].entropy == 1.0


def test_rank_requires_stride_one_map():
    bank = _eul_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    data = np.zeros((2, 8, 8), dtype=np.float32)
    with pytest.raises(DataError):
        rank_proposals([(LEFT_BOX, 0)], {2: StrideMap(2, 16, data)}, bank)


def test_select_suppresses_detected_regions_and_caps():
    bank = _eul_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    ranked = rank_proposals([(LEFT_BOX, 0), (RIGHT_BOX, 0)], _split_map(), bank)
    det = Detection(LEFT_BOX, 0, 0.9, 1, margin_logits(2, 0))
    kept = select_proposals(ranked, [det], EulConfig())
    assert [p.box for p in kept] == [RIGHT_BOX]
    assert select_proposals(ranked, [], EulConfig(top_k=1)) == ranked[:1]


def test_select_larger_top_k_extends_prefix():
    bank = _eul_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    boxes = [(BoundingBox(16.0 * i, 16.0, 16.0 * i + 16.0, 48.0), 0) for i in range(1, 6)]
    ranked = rank_proposals(boxes, _split_map(), bank)
    small = select_proposals(ranked, [], EulConfig(top_k=2))
    large = select_proposals(ranked, [], EulConfig(top_k=4))
    assert large[:2] == small


# --- end to end on planted scenes ----------------------------------------------------


def test_planted_blobs_recovered(scenes_dir, synth_bank):
    from oodkit.tensor_io import load_manifest

    manifest = load_manifest(scenes_dir / "manifest.json")
    recovered = 0
    for image in manifest.images:
        maps = manifest.load_maps(image)
        proposals = eul_propose(image, maps, image.detections, synth_bank)
        gt_box = image.ground_truth[0].box
        if any(iou(p.box, gt_box) >= 0.5 for p in proposals):
            recovered += 1
    assert recovered >= len(manifest.images) - 1  # all-same-sign blobs are invisible


def test_planted_blob_suppressed_by_coincident_detection(scenes_dir, synth_bank):
    from oodkit.tensor_io import load_manifest

    manifest = load_manifest(scenes_dir / "manifest.json")
    image = manifest.images[0]
    maps = manifest.load_maps(image)
    gt_box = image.ground_truth[0].box
    bare = eul_propose(image, maps, [], synth_bank)
    assert any(iou(p.box, gt_box) >= 0.5 for p in bare)
    det = Detection(gt_box, 0, 0.9, 1, margin_logits(5, 0))
    covered = eul_propose(image, maps, [det], synth_bank)
    assert not any(iou(p.box, gt_box) >= 0.5 for p in covered)


def test_candidates_dedup_across_levels(scenes_dir, synth_bank):
    """A region found at two thresholds appears once."""
    from oodkit.tensor_io import load_manifest

    manifest = load_manifest(scenes_dir / "manifest.json")
    for image in manifest.images[:4]:
        maps = manifest.load_maps(image)
        cands = proposal_candidates(image, maps, synth_bank, EulConfig())
        keys = [tuple(p.box.as_list()) for p in cands]
        assert len(keys) == len(set(keys))
