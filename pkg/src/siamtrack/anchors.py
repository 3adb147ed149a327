"""Anchor grid construction, IoU labelling, and box delta coding.

Boxes here are center-format float arrays (cx, cy, w, h) in search-crop
pixels. The anchor grid is anchor-major: flat index a*S*S + i*S + j for
anchor shape a at response row i, column j, matching how the 2k- and
4k-channel head outputs are reshaped. Response cell (i, j) sits at crop
coordinate offset + j*stride (x) and offset + i*stride (y), with the
grid centred in the crop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POS_LABEL = 1
NEG_LABEL = 0
IGNORE_LABEL = -1


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors for one response map, plus its geometry."""

    boxes: np.ndarray          # (k*S*S, 4) center-format, float64
    num_shapes: int            # k
    response_size: int         # S
    stride: int
    offset: float              # crop coordinate of cell (0, 0)

    @property
    def shapes(self) -> np.ndarray:
        """(k, 2) anchor widths and heights."""
        return self.boxes[:: self.response_size ** 2, 2:4]


def anchor_shapes(ratios: list[float], base_scale: int,
                  stride: int) -> np.ndarray:
    """(k, 2) anchor (w, h) with area (base_scale*stride)^2, ratio = h/w."""
    base = float(base_scale * stride)
    out = np.empty((len(ratios), 2), dtype=np.float64)
    for i, r in enumerate(ratios):
        out[i, 0] = base / np.sqrt(r)
        out[i, 1] = base * np.sqrt(r)
    return out


def build_anchor_grid(response_size: int, stride: int, ratios: list[float],
                      base_scale: int, crop_size: int) -> AnchorGrid:
    """Tile every anchor shape over the centred response grid."""
    s = response_size
    offset = (crop_size - 1) / 2.0 - (s - 1) / 2.0 * stride
    shapes = anchor_shapes(ratios, base_scale, stride)
    k = shapes.shape[0]
    xs = offset + np.arange(s, dtype=np.float64) * stride
    ys = offset + np.arange(s, dtype=np.float64) * stride
    gx, gy = np.meshgrid(xs, ys)  # (S, S): gx varies along columns
    boxes = np.empty((k, s, s, 4), dtype=np.float64)
    boxes[..., 0] = gx[None]
    boxes[..., 1] = gy[None]
    boxes[..., 2] = shapes[:, 0, None, None]
    boxes[..., 3] = shapes[:, 1, None, None]
    return AnchorGrid(boxes=boxes.reshape(-1, 4), num_shapes=k,
                      response_size=s, stride=stride, offset=offset)


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    """(..., 4) (cx, cy, w, h) -> (x0, y0, x1, y1)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2.0
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2.0
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2.0
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2.0
    return out


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = (boxes[..., 0] + boxes[..., 2]) / 2.0
    out[..., 1] = (boxes[..., 1] + boxes[..., 3]) / 2.0
    out[..., 2] = boxes[..., 2] - boxes[..., 0]
    out[..., 3] = boxes[..., 3] - boxes[..., 1]
    return out


def iou_center(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between (..., 4) and broadcastable (..., 4), center-format.

    Degenerate (non-positive size) operands get IoU 0 rather than NaN.
    """
    ca = center_to_corner(a)
    cb = center_to_corner(b)
    ix0 = np.maximum(ca[..., 0], cb[..., 0])
    iy0 = np.maximum(ca[..., 1], cb[..., 1])
    ix1 = np.minimum(ca[..., 2], cb[..., 2])
    iy1 = np.minimum(ca[..., 3], cb[..., 3])
    iw = np.clip(ix1 - ix0, 0.0, None)
    ih = np.clip(iy1 - iy0, 0.0, None)
    inter = iw * ih
    area_a = np.clip(ca[..., 2] - ca[..., 0], 0.0, None) * \
        np.clip(ca[..., 3] - ca[..., 1], 0.0, None)
    area_b = np.clip(cb[..., 2] - cb[..., 0], 0.0, None) * \
        np.clip(cb[..., 3] - cb[..., 1], 0.0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_deltas(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Box regression targets: offsets scaled by anchor size, log ratios."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(boxes[..., 2:4] <= 0) or np.any(anchors[..., 2:4] <= 0):
        raise ValueError("encode_deltas requires positive box sizes")
    out = np.empty(np.broadcast(boxes, anchors).shape, dtype=np.float64)
    out[..., 0] = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(boxes[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(boxes[..., 3] / anchors[..., 3])
    return out


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode_deltas; exact round trip up to float error."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    out = np.empty(np.broadcast(deltas, anchors).shape, dtype=np.float64)
    out[..., 0] = deltas[..., 0] * anchors[..., 2] + anchors[..., 0]
    out[..., 1] = deltas[..., 1] * anchors[..., 3] + anchors[..., 1]
    out[..., 2] = np.exp(deltas[..., 2]) * anchors[..., 2]
    out[..., 3] = np.exp(deltas[..., 3]) * anchors[..., 3]
    return out


def label_anchors(grid: AnchorGrid, gt_box: np.ndarray, pos_iou: float,
                  neg_iou: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor class labels and regression targets for one target box.

    Labels: 1 where IoU > pos_iou, 0 where IoU < neg_iou, -1 (ignored)
    in between; both comparisons strict. Regression targets are filled
    for every anchor (the loss masks them by label). A degenerate
    ground-truth box is rejected.
    """
    gt_box = np.asarray(gt_box, dtype=np.float64)
    if gt_box.shape != (4,) or gt_box[2] <= 0 or gt_box[3] <= 0:
        raise ValueError(f"degenerate ground-truth box: {gt_box!r}")
    ious = iou_center(grid.boxes, gt_box[None, :])
    labels = np.full(grid.boxes.shape[0], IGNORE_LABEL, dtype=np.int64)
    labels[ious > pos_iou] = POS_LABEL
    labels[ious < neg_iou] = NEG_LABEL
    targets = encode_deltas(gt_box[None, :], grid.boxes)
    return labels, targets


def sample_cls_indices(labels: np.ndarray, total: int, max_pos: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Indices of anchors entering the classification loss.

    Up to ``max_pos`` positives, the rest negatives, without
    replacement; fewer are returned when the pools run dry.
    """
    pos = np.flatnonzero(labels == POS_LABEL)
    neg = np.flatnonzero(labels == NEG_LABEL)
    if len(pos) > max_pos:
        pos = rng.choice(pos, size=max_pos, replace=False)
    n_neg = min(total - len(pos), len(neg))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.concatenate([pos, neg])
