"""Frame-by-frame inference: crop, correlate, penalise, update.

Initialisation extracts the template once; the attended template
features and the template channel Gram are cached and never recomputed.
Per frame the search window (previous-centre crop at the context scale)
is scored, scores are damped by a size/ratio-change penalty and blended
with a cosine window, the best anchor box is refined by the region
head, and the state is updated with a score-weighted size interpolation.
In rotated mode the predicted region mask is thresholded, its largest
connected component is wrapped in a minimum-area rectangle, and the
axis-aligned box falls back when the mask is empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch
from torch import Tensor

from .anchors import AnchorGrid, decode_deltas
from .config import RunConfig, TrackerConfig
from .data import CropTransform, context_side, get_subwindow
from .model import SiamTrackNet, make_anchor_grid
from .refinement import boxes_to_rois, clip_box_to_crop
from .rpn import flatten_deltas, foreground_scores


@dataclass
class TrackState:
    """Everything carried between frames for one tracked target."""

    center: np.ndarray                 # (2,) frame pixels
    size: np.ndarray                   # (2,) frame pixels, positive
    template: dict                     # cached template-side features
    channel_avg: np.ndarray            # frame channel means for padding
    frame_shape: tuple[int, int]


@dataclass
class TrackOutput:
    """Per-frame result: axis-aligned box, score, optional extras."""

    box: np.ndarray                    # (4,) top-left x, y, w, h
    score: float
    rotated: np.ndarray | None = None  # (5,) cx, cy, w, h, angle degrees
    mask: np.ndarray | None = None     # frame-sized float [0, 1]


def cosine_window(size: int, num_anchors: int) -> np.ndarray:
    """Outer-product Hanning window tiled per anchor, flat anchor-major."""
    w = np.hanning(size)
    win2d = np.outer(w, w)
    return np.tile(win2d.reshape(-1), num_anchors)


def _change(r: np.ndarray) -> np.ndarray:
    return np.maximum(r, 1.0 / r)


def _sz(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


def apply_penalties(scores: np.ndarray, boxes: np.ndarray,
                    prev_size_crop: tuple[float, float],
                    window: np.ndarray,
                    cfg: TrackerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scale/ratio-change penalty plus cosine-window blending.

    boxes are decoded proposals (N, 4) in crop pixels; prev_size_crop is
    the current target size mapped into the same scale. Returns
    (penalised window-blended scores, raw penalties).
    """
    pw, ph = boxes[:, 2], boxes[:, 3]
    tw, th = prev_size_crop
    s_c = _change(_sz(pw, ph) / _sz(np.float64(tw), np.float64(th)))
    r_c = _change((tw / th) / (pw / ph))
    penalty = np.exp(-(r_c * s_c - 1.0) * cfg.penalty_k)
    pscore = penalty * scores
    pscore = pscore * (1 - cfg.window_influence) + \
        window * cfg.window_influence
    return pscore, penalty


def rotated_box_from_mask(mask: np.ndarray, threshold: float,
                          fallback_box: np.ndarray) -> np.ndarray:
    """Minimum-area rectangle of the largest mask component.

    mask is a float map in [0, 1] in frame coordinates; with nothing
    above threshold the axis-aligned fallback (top-left format) is
    returned as a zero-angle rotated box.
    """
    binary = (mask > threshold).astype(np.uint8)
    if binary.any():
        count, labels = cv2.connectedComponents(binary)
        best, best_area = 0, 0
        for lab in range(1, count):
            area = int((labels == lab).sum())
            if area > best_area:
                best, best_area = lab, area
        ys, xs = np.nonzero(labels == best)
        pts = np.stack([xs, ys], axis=1).astype(np.float32)
        (cx, cy), (w, h), angle = cv2.minAreaRect(pts)
        if w > 0 and h > 0:
            return np.array([cx, cy, w, h, angle], dtype=np.float64)
    x, y, w, h = fallback_box
    return np.array([x + w / 2, y + h / 2, w, h, 0.0], dtype=np.float64)


def _to_tensor(img: np.ndarray) -> Tensor:
    return torch.from_numpy(img.transpose(2, 0, 1)).float().unsqueeze(0)


class Tracker:
    """Stateful single-target tracker around a trained network."""

    def __init__(self, model: SiamTrackNet, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.grid: AnchorGrid = make_anchor_grid(cfg)
        self.window = cosine_window(self.grid.response_size,
                                    self.grid.num_shapes)
        self.box_map, self.mask_map = model.coord_maps()
        model.eval()

    # -- geometry ---------------------------------------------------------

    def _crop_sides(self, size: np.ndarray) -> tuple[float, float]:
        d = self.cfg.data
        box = np.array([0.0, 0.0, size[0], size[1]])
        s_z = context_side(box, d.context_amount)
        s_x = s_z * d.search_size / d.exemplar_size
        return s_z, s_x

    def init(self, frame: np.ndarray, box: np.ndarray) -> TrackState:
        """Start tracking `box` (top-left x, y, w, h) in `frame`."""
        box = np.asarray(box, dtype=np.float64)
        if box[2] <= 0 or box[3] <= 0:
            raise ValueError(f"initial box must have positive size: {box!r}")
        center = np.array([box[0] + box[2] / 2, box[1] + box[3] / 2])
        size = box[2:4].copy()
        channel_avg = frame.mean(axis=(0, 1))
        s_z, s_x = self._crop_sides(size)
        d = self.cfg.data
        exemplar, _ = get_subwindow(frame, tuple(center), d.exemplar_size,
                                    s_z, channel_avg)
        search0, _ = get_subwindow(frame, tuple(center), d.search_size,
                                   s_x, channel_avg)
        template = self.model.template_state(_to_tensor(exemplar),
                                             _to_tensor(search0))
        return TrackState(center=center, size=size, template=template,
                          channel_avg=channel_avg,
                          frame_shape=frame.shape[:2])

    def track(self, frame: np.ndarray,
              state: TrackState) -> tuple[TrackOutput, TrackState]:
        """Locate the target in the next frame and update the state."""
        d = self.cfg.data
        t = self.cfg.tracker
        s_z, s_x = self._crop_sides(state.size)
        scale = d.exemplar_size / s_z  # also search_size / s_x
        search, tf = get_subwindow(frame, tuple(state.center),
                                   d.search_size, s_x, state.channel_avg)
        out = self.model.track_response(_to_tensor(search), state.template)
        scores = foreground_scores(out.cls_map)
        deltas = flatten_deltas(out.reg_map)
        proposals = decode_deltas(deltas, self.grid.boxes)
        prev_size_crop = (state.size[0] * scale, state.size[1] * scale)
        pscore, penalty = apply_penalties(scores, proposals, prev_size_crop,
                                          self.window, t)
        best = int(np.argmax(pscore))
        best_box = proposals[best]

        refined_crop = best_box
        mask_frame = None
        rotated = None
        if self.model.refine is not None:
            region = clip_box_to_crop(best_box, d.search_size)
            rois = boxes_to_rois(region[None], np.zeros(1), self.box_map,
                                 out.box_feat.device)
            with torch.no_grad():
                delta = self.model.refine.refine_boxes(out.box_feat, rois)
            refined_crop = decode_deltas(
                delta[0].numpy().astype(np.float64), region)
            if t.mode == "rotated_from_mask":
                mask_frame, rotated = self._region_mask(
                    out, region, tf, frame.shape[:2])

        box_frame = tf.box_to_frame(refined_crop)
        lr = t.size_lr * float(penalty[best]) * float(scores[best])
        new_w = (1 - lr) * state.size[0] + lr * box_frame[2]
        new_h = (1 - lr) * state.size[1] + lr * box_frame[3]
        h_img, w_img = state.frame_shape
        cx = float(np.clip(box_frame[0], 0, w_img - 1))
        cy = float(np.clip(box_frame[1], 0, h_img - 1))
        new_w = float(np.clip(new_w, 2.0, w_img))
        new_h = float(np.clip(new_h, 2.0, h_img))
        state.center = np.array([cx, cy])
        state.size = np.array([new_w, new_h])
        out_box = np.array([cx - new_w / 2, cy - new_h / 2, new_w, new_h])
        if t.mode == "rotated_from_mask" and rotated is None:
            rotated = np.array([cx, cy, new_w, new_h, 0.0])
        return TrackOutput(box=out_box, score=float(scores[best]),
                           rotated=rotated, mask=mask_frame), state

    def _region_mask(self, out, region_crop: np.ndarray, tf: CropTransform,
                     frame_shape: tuple[int, int]
                     ) -> tuple[np.ndarray, np.ndarray | None]:
        """Decode the region mask and fit a rotated box in frame space."""
        t = self.cfg.tracker
        rois = boxes_to_rois(region_crop[None], np.zeros(1), self.mask_map,
                             out.mask_feat.device)
        with torch.no_grad():
            logits = self.model.refine.predict_masks(out.mask_feat, rois)
            prob = torch.sigmoid(logits)[0, 0].numpy()
        region_frame = tf.box_to_frame(region_crop)
        h_img, w_img = frame_shape
        canvas = np.zeros((h_img, w_img), dtype=np.float32)
        x0 = region_frame[0] - region_frame[2] / 2
        y0 = region_frame[1] - region_frame[3] / 2
        px0, py0 = int(np.floor(x0)), int(np.floor(y0))
        px1 = int(np.ceil(x0 + region_frame[2]))
        py1 = int(np.ceil(y0 + region_frame[3]))
        px0c, py0c = max(px0, 0), max(py0, 0)
        px1c, py1c = min(px1, w_img), min(py1, h_img)
        if px1c > px0c and py1c > py0c:
            resized = cv2.resize(prob, (max(px1 - px0, 1), max(py1 - py0, 1)),
                                 interpolation=cv2.INTER_LINEAR)
            canvas[py0c:py1c, px0c:px1c] = \
                resized[py0c - py0:py1c - py0, px0c - px0:px1c - px0]
        fallback = np.array([region_frame[0] - region_frame[2] / 2,
                             region_frame[1] - region_frame[3] / 2,
                             region_frame[2], region_frame[3]])
        rotated = rotated_box_from_mask(canvas, t.mask_threshold, fallback)
        return canvas, rotated
