"""Tracking quality metrics and the failure/reset protocol.

Boxes are top-left (x, y, w, h) in frame pixels throughout this module.
Precision is the fraction of frames whose predicted centre lies
strictly within a pixel radius of the truth; the success curve samples
overlap thresholds evenly on [0, 1] and counts frames with IoU strictly
above each; its mean is the area-under-curve score. The first frame of
a run is the initialisation and is not scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def iou_tlwh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of top-left-format boxes; broadcasts; degenerate boxes get 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix0 = np.maximum(a[..., 0], b[..., 0])
    iy0 = np.maximum(a[..., 1], b[..., 1])
    ix1 = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2])
    iy1 = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = np.clip(a[..., 2], 0, None) * np.clip(a[..., 3], 0, None)
    area_b = np.clip(b[..., 2], 0, None) * np.clip(b[..., 3], 0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def center_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between box centres (top-left format)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx = (a[..., 0] + a[..., 2] / 2) - (b[..., 0] + b[..., 2] / 2)
    dy = (a[..., 1] + a[..., 3] / 2) - (b[..., 1] + b[..., 3] / 2)
    return np.sqrt(dx * dx + dy * dy)


def success_curve(ious: np.ndarray, steps: int = 101) -> np.ndarray:
    """Fraction of frames with IoU strictly above each threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    thresholds = np.linspace(0.0, 1.0, steps)
    if ious.size == 0:
        return np.zeros(steps)
    return (ious[None, :] > thresholds[:, None]).mean(axis=1)


def precision_at(errors: np.ndarray, radius: float) -> float:
    """Fraction of frames with centre error strictly below radius."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return 0.0
    return float((errors < radius).mean())


def precision_curve(errors: np.ndarray, max_px: float = 50.0,
                    steps: int = 51) -> np.ndarray:
    radii = np.linspace(0.0, max_px, steps)
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return np.zeros(steps)
    return (errors[None, :] < radii[:, None]).mean(axis=1)


@dataclass
class SequenceMetrics:
    seq_id: str
    num_frames: int
    precision: float
    auc: float
    mean_iou: float
    success: np.ndarray

    def to_dict(self) -> dict:
        return {"seq_id": self.seq_id, "num_frames": self.num_frames,
                "precision": self.precision, "auc": self.auc,
                "mean_iou": self.mean_iou,
                "success": [float(v) for v in self.success]}


@dataclass
class MetricReport:
    """Per-sequence scores plus their unweighted means."""

    sequences: list[SequenceMetrics] = field(default_factory=list)
    config_hash: str = ""

    @property
    def precision(self) -> float:
        return float(np.mean([s.precision for s in self.sequences])) \
            if self.sequences else 0.0

    @property
    def auc(self) -> float:
        return float(np.mean([s.auc for s in self.sequences])) \
            if self.sequences else 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.mean_iou for s in self.sequences])) \
            if self.sequences else 0.0

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash,
                "precision": self.precision, "auc": self.auc,
                "mean_iou": self.mean_iou,
                "sequences": [s.to_dict() for s in self.sequences]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def score_sequence(seq_id: str, pred: np.ndarray, gt: np.ndarray,
                   precision_px: float = 20.0,
                   success_steps: int = 101) -> SequenceMetrics:
    """Score tracked boxes against truth; both (N, 4) top-left format.

    The caller passes only scored frames (the init frame is excluded by
    the runner, not here).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(
            f"prediction/truth shape mismatch: {pred.shape} vs {gt.shape}")
    ious = iou_tlwh(pred, gt)
    errors = center_error(pred, gt)
    curve = success_curve(ious, success_steps)
    return SequenceMetrics(
        seq_id=seq_id, num_frames=pred.shape[0],
        precision=precision_at(errors, precision_px),
        auc=float(curve.mean()), mean_iou=float(ious.mean()),
        success=curve)


@dataclass
class ResetResult:
    """Outcome of one reset-protocol run over a sequence."""

    mean_iou: float
    failures: int
    events: list[dict]
    num_scored: int


def run_reset_protocol(tracker, record, burn_in: int = 5) -> ResetResult:
    """VOT-style evaluation: re-initialise after total-loss failures.

    A failure is a frame with zero overlap against truth. The tracker
    is re-initialised ``burn_in`` frames later (frames in between are
    not scored); init frames are not scored either. Accuracy is the
    mean IoU over scored frames.
    """
    n = len(record)
    gt_tl = record.boxes.copy()
    gt_tl[:, 0] -= gt_tl[:, 2] / 2
    gt_tl[:, 1] -= gt_tl[:, 3] / 2
    events: list[dict] = [{"frame": 0, "type": "init"}]
    state = tracker.init(record.load_frame(0), gt_tl[0])
    ious: list[float] = []
    failures = 0
    i = 1
    while i < n:
        out, state = tracker.track(record.load_frame(i), state)
        iou = float(iou_tlwh(out.box, gt_tl[i]))
        if iou == 0.0:
            failures += 1
            events.append({"frame": i, "type": "failure"})
            ri = i + burn_in
            if ri >= n:
                break
            state = tracker.init(record.load_frame(ri), gt_tl[ri])
            events.append({"frame": ri, "type": "init"})
            i = ri + 1
            continue
        ious.append(iou)
        i += 1
    mean_iou = float(np.mean(ious)) if ious else 0.0
    return ResetResult(mean_iou=mean_iou, failures=failures, events=events,
                       num_scored=len(ious))
