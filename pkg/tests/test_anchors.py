"""Anchor geometry, IoU labelling, and delta coding."""

from __future__ import annotations

import numpy as np
import pytest

from siamtrack.anchors import (IGNORE_LABEL, NEG_LABEL, POS_LABEL,
                               anchor_shapes, build_anchor_grid,
                               center_to_corner, corner_to_center,
                               decode_deltas, encode_deltas, iou_center,
                               label_anchors, sample_cls_indices)

RATIOS = [0.33, 0.5, 1.0, 2.0, 3.0]


def test_anchor_shapes_area_and_ratio():
    shapes = anchor_shapes(RATIOS, base_scale=8, stride=8)
    assert shapes.shape == (5, 2)
    areas = shapes[:, 0] * shapes[:, 1]
    assert np.allclose(areas, 64.0 ** 2, rtol=1e-12)
    assert np.allclose(shapes[:, 1] / shapes[:, 0], RATIOS, rtol=1e-12)
    # ratio 1 anchor is exactly 64 x 64
    assert np.allclose(shapes[2], [64.0, 64.0])


def test_grid_layout_and_offset():
    grid = build_anchor_grid(response_size=25, stride=8, ratios=RATIOS,
                             base_scale=8, crop_size=255)
    assert grid.boxes.shape == (5 * 25 * 25, 4)
    assert grid.offset == pytest.approx(31.0)
    assert grid.num_shapes == 5
    # flat index a*S*S + i*S + j
    s = 25
    a, i, j = 3, 10, 4
    box = grid.boxes[a * s * s + i * s + j]
    assert box[0] == pytest.approx(31.0 + j * 8)
    assert box[1] == pytest.approx(31.0 + i * 8)
    shapes = anchor_shapes(RATIOS, 8, 8)
    assert np.allclose(box[2:], shapes[a])
    # grid is centred: first and last cells are symmetric about the crop
    assert grid.boxes[0, 0] + grid.boxes[s - 1, 0] == pytest.approx(254.0)
    assert np.allclose(grid.shapes, shapes)


def test_corner_roundtrip():
    rng = np.random.Generator(np.random.PCG64(0))
    boxes = np.stack([rng.uniform(0, 200, 100), rng.uniform(0, 200, 100),
                      rng.uniform(1, 80, 100), rng.uniform(1, 80, 100)],
                     axis=-1)
    back = corner_to_center(center_to_corner(boxes))
    assert np.max(np.abs(back - boxes)) < 1e-9


def test_iou_hand_cases():
    a = np.array([10.0, 10.0, 10.0, 10.0])
    assert iou_center(a, a) == pytest.approx(1.0)
    # half-overlap along x: inter 50, union 150
    b = np.array([15.0, 10.0, 10.0, 10.0])
    assert iou_center(a, b) == pytest.approx(50.0 / 150.0)
    # disjoint
    c = np.array([100.0, 100.0, 10.0, 10.0])
    assert iou_center(a, c) == 0.0
    # contained: 4x4 inside 10x10
    d = np.array([10.0, 10.0, 4.0, 4.0])
    assert iou_center(a, d) == pytest.approx(16.0 / 100.0)
    # degenerate operand gives 0, not NaN
    z = np.array([10.0, 10.0, 0.0, 5.0])
    assert iou_center(z, z) == 0.0


def test_delta_roundtrip_1000_pairs():
    rng = np.random.Generator(np.random.PCG64(7))
    n = 1000
    boxes = np.stack([rng.uniform(-50, 300, n), rng.uniform(-50, 300, n),
                      rng.uniform(0.5, 120, n), rng.uniform(0.5, 120, n)],
                     axis=-1)
    anchors = np.stack([rng.uniform(0, 255, n), rng.uniform(0, 255, n),
                        rng.uniform(5, 100, n), rng.uniform(5, 100, n)],
                       axis=-1)
    deltas = encode_deltas(boxes, anchors)
    back = decode_deltas(deltas, anchors)
    assert np.max(np.abs(back - boxes)) < 1e-5


def test_encode_hand_case():
    anchor = np.array([100.0, 100.0, 50.0, 40.0])
    box = np.array([110.0, 90.0, 100.0, 20.0])
    d = encode_deltas(box, anchor)
    assert d[0] == pytest.approx(10.0 / 50.0)
    assert d[1] == pytest.approx(-10.0 / 40.0)
    assert d[2] == pytest.approx(np.log(2.0))
    assert d[3] == pytest.approx(np.log(0.5))


def test_encode_rejects_degenerate():
    good = np.array([0.0, 0.0, 10.0, 10.0])
    bad = np.array([0.0, 0.0, -1.0, 10.0])
    with pytest.raises(ValueError, match="positive"):
        encode_deltas(bad, good)
    with pytest.raises(ValueError, match="positive"):
        encode_deltas(good, bad)


def test_label_thresholds_are_strict():
    grid = build_anchor_grid(response_size=1, stride=8, ratios=[1.0],
                             base_scale=8, crop_size=255)
    gt = grid.boxes[0].copy()
    gt[0] += 16.0  # overlap IoU = (64-16)/(64+16) = 0.6
    iou = float(iou_center(grid.boxes[0], gt))
    assert iou == pytest.approx(0.6)
    # pin the threshold to the measured value: equality must not count
    labels, _ = label_anchors(grid, gt, pos_iou=iou, neg_iou=0.0)
    assert labels[0] == IGNORE_LABEL
    labels, _ = label_anchors(grid, gt, pos_iou=iou - 1e-9, neg_iou=0.0)
    assert labels[0] == POS_LABEL
    labels, _ = label_anchors(grid, gt, pos_iou=1.0, neg_iou=iou)
    assert labels[0] == IGNORE_LABEL
    labels, _ = label_anchors(grid, gt, pos_iou=1.0, neg_iou=iou + 1e-9)
    assert labels[0] == NEG_LABEL


def test_label_default_bands():
    """With the 0.6/0.3 thresholds the three bands all appear for an
    off-centre ground-truth box in the full grid."""
    grid = build_anchor_grid(25, 8, RATIOS, 8, 255)
    gt = np.array([127.0, 119.0, 60.0, 68.0])
    labels, _ = label_anchors(grid, gt, 0.6, 0.3)
    ious = iou_center(grid.boxes, gt[None, :])
    assert np.array_equal(labels == POS_LABEL, ious > 0.6)
    assert np.array_equal(labels == NEG_LABEL, ious < 0.3)
    for val in (POS_LABEL, NEG_LABEL, IGNORE_LABEL):
        assert np.any(labels == val)


def test_label_targets_encode_gt():
    grid = build_anchor_grid(25, 8, RATIOS, 8, 255)
    gt = np.array([127.0, 127.0, 30.0, 50.0])
    labels, targets = label_anchors(grid, gt, 0.6, 0.3)
    assert targets.shape == grid.boxes.shape
    want = encode_deltas(gt[None, :], grid.boxes)
    assert np.array_equal(targets, want)
    assert set(np.unique(labels)) <= {POS_LABEL, NEG_LABEL, IGNORE_LABEL}


def test_label_rejects_degenerate_gt():
    grid = build_anchor_grid(25, 8, RATIOS, 8, 255)
    with pytest.raises(ValueError, match="degenerate"):
        label_anchors(grid, np.array([10.0, 10.0, 0.0, 5.0]), 0.6, 0.3)
    with pytest.raises(ValueError, match="degenerate"):
        label_anchors(grid, np.array([10.0, 10.0, 5.0]), 0.6, 0.3)


def test_sample_cls_indices_caps_positives():
    rng = np.random.Generator(np.random.PCG64(1))
    labels = np.full(500, IGNORE_LABEL, dtype=np.int64)
    labels[:40] = POS_LABEL
    labels[100:400] = NEG_LABEL
    idx = sample_cls_indices(labels, total=64, max_pos=16, rng=rng)
    assert len(idx) == 64
    assert np.sum(labels[idx] == POS_LABEL) == 16
    assert np.sum(labels[idx] == NEG_LABEL) == 48
    assert len(np.unique(idx)) == 64  # no replacement


def test_sample_cls_indices_few_positives():
    rng = np.random.Generator(np.random.PCG64(2))
    labels = np.full(500, IGNORE_LABEL, dtype=np.int64)
    labels[:3] = POS_LABEL
    labels[100:400] = NEG_LABEL
    idx = sample_cls_indices(labels, 64, 16, rng)
    assert len(idx) == 64
    assert np.sum(labels[idx] == POS_LABEL) == 3
    assert np.sum(labels[idx] == NEG_LABEL) == 61


def test_sample_cls_indices_pools_run_dry():
    rng = np.random.Generator(np.random.PCG64(3))
    labels = np.full(50, IGNORE_LABEL, dtype=np.int64)
    labels[:2] = POS_LABEL
    labels[10:20] = NEG_LABEL
    idx = sample_cls_indices(labels, 64, 16, rng)
    assert len(idx) == 12  # 2 positives + all 10 negatives
    # no positives at all still works
    labels[:2] = IGNORE_LABEL
    idx = sample_cls_indices(labels, 64, 16, rng)
    assert len(idx) == 10
    assert np.all(labels[idx] == NEG_LABEL)


def test_sample_cls_indices_deterministic():
    labels = np.full(500, NEG_LABEL, dtype=np.int64)
    labels[:100] = POS_LABEL
    a = sample_cls_indices(labels, 64, 16, np.random.Generator(np.random.PCG64(5)))
    b = sample_cls_indices(labels, 64, 16, np.random.Generator(np.random.PCG64(5)))
    assert np.array_equal(a, b)
